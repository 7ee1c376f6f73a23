//! Reverse-mode tape over dense f64 tensors.
//!
//! Ops evaluate eagerly as the graph is built; [`Tape::backward`] replays the
//! recorded nodes in reverse and accumulates gradients, summing over fan-out.
//! Construction and backward are single-threaded and run in a fixed order,
//! so identical inputs give bitwise-identical values and gradients.

use std::sync::Arc;

use thiserror::Error;

use super::kernels::{self, SamplePad};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

enum Op {
    Leaf,
    Conv2d { input: TensorId, weight: TensorId, bias: Option<TensorId>, stride: usize, pad: usize },
    /// base + response of a zero-padded 3x3 conv over spatially constant
    /// channels (values in `cvals`, weights in `weight [cout,d,3,3]`).
    ConstConvAdd {
        base: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        cvals: Arc<Vec<f64>>,
    },
    GridSample { input: TensorId, coords: TensorId, pad: SamplePad },
    SampleField { field: TensorId, positions: TensorId },
    GaussianBlur { input: TensorId, taps: Arc<Vec<f64>> },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, c: f64 },
    LeakyRelu { a: TensorId, alpha: f64 },
    Relu { a: TensorId },
    Abs { a: TensorId },
    Square { a: TensorId },
    Concat { parts: Vec<TensorId> },
    SliceChannel { a: TensorId, ch: usize },
    Upsample2x { a: TensorId, mode: UpsampleMode },
    Sum { a: TensorId },
    Mean { a: TensorId },
    InstanceNorm { a: TensorId, stats: Vec<(f64, f64)> },
    NormalizeChannels { a: TensorId, min_denom: f64 },
    JacobianDet { field: TensorId },
    GradSqMean { u: TensorId },
    PlanesToPairs { a: TensorId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    needs_grad: bool,
}

/// Reverse-mode tape. Build the graph through the op methods, call
/// [`Tape::backward`] on a scalar root, then read gradients with
/// [`Tape::grad`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    min_kink: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), min_kink: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any nonlinearity input to its kink observed while
    /// building this tape (relu/abs zero crossings, bilinear cell boundaries,
    /// renormalization floors). Infinite when no such op was recorded.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.idx()].data
    }

    /// Shared handle to a node's value buffer (no copy).
    pub fn data_arc(&self, id: TensorId) -> Arc<Vec<f64>> {
        Arc::clone(&self.nodes[id.idx()].data)
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(self.shape(id)), 1);
        self.nodes[id.idx()].data[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Gradient of the last backward root w.r.t. `id`, if it was computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.idx()).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        self.push_shared(op, shape, Arc::new(data), needs_grad)
    }

    fn push_shared(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        needs_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { op, shape, data, needs_grad });
        id
    }

    fn note_kink(&mut self, d: f64) {
        if d < self.min_kink {
            self.min_kink = d;
        }
    }

    // ------------------------------------------------------------- leaves --

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> TensorId {
        assert_eq!(numel(shape), data.len(), "leaf data length must match shape");
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    /// Leaf backed by shared data (no copy); used for cached constants and
    /// model parameters.
    pub fn leaf_shared(
        &mut self,
        shape: &[usize],
        data: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> TensorId {
        assert_eq!(numel(shape), data.len(), "leaf data length must match shape");
        self.push_shared(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> TensorId {
        self.leaf(&[1], vec![v], false)
    }

    // ---------------------------------------------------------------- ops --

    /// 2-D convolution: `input [cin,h,w]`, `weight [cout,cin,k,k]`, optional
    /// `bias [cout]`, zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, AutodiffError> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 3 {
            return Err(shape_err("conv2d", format!("input must be [c,h,w], got {ishape:?}")));
        }
        if wshape.len() != 4 || wshape[2] != wshape[3] {
            return Err(shape_err(
                "conv2d",
                format!("weight must be [cout,cin,k,k], got {wshape:?}"),
            ));
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, k) = (wshape[0], wshape[2]);
        if wshape[1] != cin {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {} input channels, input has {cin}", wshape[1]),
            ));
        }
        if stride == 0 {
            return Err(AutodiffError::Invalid { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} exceeds padded input {h}x{w} (pad {pad})"),
            ));
        }
        if let Some(b) = bias {
            let bshape = self.shape(b);
            if bshape != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias must be [{cout}], got {bshape:?}"),
                ));
            }
        }
        let oh = kernels::conv_out_len(h, k, stride, pad);
        let ow = kernels::conv_out_len(w, k, stride, pad);
        let mut out = vec![0.0; cout * oh * ow];
        kernels::conv2d_fwd(
            self.value(input),
            cin,
            h,
            w,
            self.value(weight),
            bias.map(|b| self.value(b)),
            cout,
            k,
            stride,
            pad,
            &mut out,
        );
        let needs = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Op::Conv2d { input, weight, bias, stride, pad },
            vec![cout, oh, ow],
            out,
            needs,
        ))
    }

    /// `base [cout,h,w]` plus the response of a zero-padded 3x3 convolution
    /// (`weight [cout,d,3,3]`, optional `bias [cout]`) to `d` spatially
    /// constant channels with values `cvals`. Equivalent to materializing the
    /// constant channels and convolving, but O(h*w) instead of O(h*w*d*9).
    pub fn const_conv_add(
        &mut self,
        base: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        cvals: Arc<Vec<f64>>,
    ) -> Result<TensorId, AutodiffError> {
        let bshape = self.shape(base).to_vec();
        let wshape = self.shape(weight).to_vec();
        if bshape.len() != 3 {
            return Err(shape_err("const_conv_add", format!("base must be [c,h,w], got {bshape:?}")));
        }
        let (cout, h, w) = (bshape[0], bshape[1], bshape[2]);
        if wshape != [cout, cvals.len(), 3, 3] {
            return Err(shape_err(
                "const_conv_add",
                format!("weight must be [{cout},{},3,3], got {wshape:?}", cvals.len()),
            ));
        }
        if h < 2 || w < 2 {
            return Err(AutodiffError::Invalid {
                op: "const_conv_add",
                detail: format!("needs spatial extent >= 2, got {h}x{w}"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err(
                    "const_conv_add",
                    format!("bias must be [{cout}], got {:?}", self.shape(b)),
                ));
            }
        }
        let table = kernels::const_response_table(
            self.value(weight),
            cout,
            cvals.len(),
            0,
            &cvals,
            bias.map(|b| self.value(b)),
        );
        let mut out = self.value(base).to_vec();
        kernels::const_response_add(&table, cout, h, w, &mut out);
        let needs = self.requires_grad(base)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Op::ConstConvAdd { base, weight, bias, cvals }, bshape, out, needs))
    }

    /// Bilinear sampling of `input [c,h,w]` (or `[h,w]`) at positions
    /// `coords [hc,wc,2]`, (x, y) order. Out-of-domain behavior per `pad`.
    pub fn grid_sample(
        &mut self,
        input: TensorId,
        coords: TensorId,
        pad: SamplePad,
    ) -> Result<TensorId, AutodiffError> {
        let ishape = self.shape(input).to_vec();
        let cshape = self.shape(coords).to_vec();
        let (c, h, w, rank2) = match ishape.as_slice() {
            [h, w] => (1, *h, *w, true),
            [c, h, w] => (*c, *h, *w, false),
            _ => {
                return Err(shape_err(
                    "grid_sample",
                    format!("input must be [c,h,w] or [h,w], got {ishape:?}"),
                ))
            }
        };
        if cshape.len() != 3 || cshape[2] != 2 {
            return Err(shape_err(
                "grid_sample",
                format!("coords must be [h,w,2], got {cshape:?}"),
            ));
        }
        if let SamplePad::PerChannel(vs) = &pad {
            if vs.len() != c {
                return Err(shape_err(
                    "grid_sample",
                    format!("per-channel padding has {} values for {c} channels", vs.len()),
                ));
            }
        }
        let n = cshape[0] * cshape[1];
        let mut out = vec![0.0; c * n];
        kernels::bilinear_sample_fwd(self.value(input), c, h, w, self.value(coords), n, &pad, &mut out);
        self.note_coord_kinks(coords);
        let needs = self.requires_grad(input) || self.requires_grad(coords);
        let oshape = if rank2 { vec![cshape[0], cshape[1]] } else { vec![c, cshape[0], cshape[1]] };
        Ok(self.push(Op::GridSample { input, coords, pad }, oshape, out, needs))
    }

    /// Bilinear sampling of a two-component field `field [h,w,2]` at
    /// `positions [hp,wp,2]`; positions outside the domain clamp to the
    /// border. Output `[hp,wp,2]`.
    pub fn sample_field(
        &mut self,
        field: TensorId,
        positions: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let fshape = self.shape(field).to_vec();
        let pshape = self.shape(positions).to_vec();
        if fshape.len() != 3 || fshape[2] != 2 {
            return Err(shape_err("sample_field", format!("field must be [h,w,2], got {fshape:?}")));
        }
        if pshape.len() != 3 || pshape[2] != 2 {
            return Err(shape_err(
                "sample_field",
                format!("positions must be [h,w,2], got {pshape:?}"),
            ));
        }
        let (h, w) = (fshape[0], fshape[1]);
        let n = pshape[0] * pshape[1];
        let mut out = vec![0.0; 2 * n];
        kernels::sample_field_fwd(self.value(field), h, w, self.value(positions), n, &mut out);
        self.note_coord_kinks(positions);
        let needs = self.requires_grad(field) || self.requires_grad(positions);
        Ok(self.push(Op::SampleField { field, positions }, pshape, out, needs))
    }

    /// Separable reflect-padded Gaussian blur with radius `ceil(3 sigma)`.
    pub fn gaussian_blur(&mut self, input: TensorId, sigma: f64) -> Result<TensorId, AutodiffError> {
        if !(sigma > 0.0) {
            return Err(AutodiffError::Invalid {
                op: "gaussian_blur",
                detail: format!("sigma must be > 0, got {sigma}"),
            });
        }
        let ishape = self.shape(input).to_vec();
        let (c, h, w) = match ishape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(shape_err(
                    "gaussian_blur",
                    format!("input must be [c,h,w] or [h,w], got {ishape:?}"),
                ))
            }
        };
        let taps = Arc::new(kernels::gaussian_taps(sigma));
        let mut out = vec![0.0; c * h * w];
        kernels::blur2d_fwd(self.value(input), c, h, w, &taps, &mut out);
        let needs = self.requires_grad(input);
        Ok(self.push(Op::GaussianBlur { input, taps }, ishape, out, needs))
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Vec<usize>, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let shape = self.binary_shapes("add", a, b)?;
        let out: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add { a, b }, shape, out, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let shape = self.binary_shapes("sub", a, b)?;
        let out: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let needs = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Sub { a, b }, shape, out, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let shape = self.binary_shapes("mul", a, b)?;
        let out: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Mul { a, b }, shape, out, needs))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let shape = self.binary_shapes("div", a, b)?;
        let out: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x / y).collect();
        let needs = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Div { a, b }, shape, out, needs))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let needs = self.requires_grad(a);
        self.push(Op::AddScalar { a }, shape, out, needs)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.requires_grad(a);
        self.push(Op::MulScalar { a, c }, shape, out, needs)
    }

    pub fn leaky_relu(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let mut kink = f64::INFINITY;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| {
                kink = kink.min(x.abs());
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            })
            .collect();
        self.note_kink(kink);
        let needs = self.requires_grad(a);
        self.push(Op::LeakyRelu { a, alpha }, shape, out, needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let mut kink = f64::INFINITY;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| {
                kink = kink.min(x.abs());
                x.max(0.0)
            })
            .collect();
        self.note_kink(kink);
        let needs = self.requires_grad(a);
        self.push(Op::Relu { a }, shape, out, needs)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let mut kink = f64::INFINITY;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| {
                kink = kink.min(x.abs());
                x.abs()
            })
            .collect();
        self.note_kink(kink);
        let needs = self.requires_grad(a);
        self.push(Op::Abs { a }, shape, out, needs)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.value(a).iter().map(|x| x * x).collect();
        let needs = self.requires_grad(a);
        self.push(Op::Square { a }, shape, out, needs)
    }

    /// Concatenation along the channel axis of `[c,h,w]` tensors.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid { op: "concat", detail: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(shape_err("concat", format!("inputs must be [c,h,w], got {first:?}")));
        }
        let (h, w) = (first[1], first[2]);
        let mut ctotal = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(shape_err(
                    "concat",
                    format!("spatial dims differ: {first:?} vs {s:?}"),
                ));
            }
            ctotal += s[0];
        }
        let mut out = Vec::with_capacity(ctotal * h * w);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![ctotal, h, w], out, needs))
    }

    /// Single channel `ch` of a `[c,h,w]` tensor as `[1,h,w]`.
    pub fn slice_channel(&mut self, a: TensorId, ch: usize) -> Result<TensorId, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(shape_err("slice_channel", format!("input must be [c,h,w], got {s:?}")));
        }
        if ch >= s[0] {
            return Err(AutodiffError::Invalid {
                op: "slice_channel",
                detail: format!("channel {ch} out of range for {} channels", s[0]),
            });
        }
        let n = s[1] * s[2];
        let out = self.value(a)[ch * n..(ch + 1) * n].to_vec();
        let needs = self.requires_grad(a);
        Ok(self.push(Op::SliceChannel { a, ch }, vec![1, s[1], s[2]], out, needs))
    }

    pub fn upsample2x(
        &mut self,
        a: TensorId,
        mode: UpsampleMode,
    ) -> Result<TensorId, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("input must be [c,h,w], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        match mode {
            UpsampleMode::Nearest => {
                kernels::upsample2x_nearest_fwd(self.value(a), c, h, w, &mut out)
            }
            UpsampleMode::Bilinear => {
                kernels::upsample2x_bilinear_fwd(self.value(a), c, h, w, &mut out)
            }
        }
        let needs = self.requires_grad(a);
        Ok(self.push(Op::Upsample2x { a, mode }, vec![c, 2 * h, 2 * w], out, needs))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let v = kernels::sum_f64(self.value(a));
        let needs = self.requires_grad(a);
        self.push(Op::Sum { a }, vec![1], vec![v], needs)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len();
        let v = kernels::sum_f64(self.value(a)) / n as f64;
        let needs = self.requires_grad(a);
        self.push(Op::Mean { a }, vec![1], vec![v], needs)
    }

    /// Per-channel standardization of `[c,h,w]` over the spatial extent.
    pub fn instance_norm(&mut self, a: TensorId, eps: f64) -> Result<TensorId, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(shape_err("instance_norm", format!("input must be [c,h,w], got {s:?}")));
        }
        let (c, n) = (s[0], s[1] * s[2]);
        let mut out = vec![0.0; c * n];
        let stats = kernels::instance_norm_fwd(self.value(a), c, n, eps, &mut out);
        let needs = self.requires_grad(a);
        Ok(self.push(Op::InstanceNorm { a, stats }, s, out, needs))
    }

    /// Rescales every pixel of `[c,h,w]` so the channel sum is one. The
    /// denominator is floored at `min_denom`; pixels whose channels already
    /// sum to exactly one pass through bitwise.
    pub fn normalize_channels(
        &mut self,
        a: TensorId,
        min_denom: f64,
    ) -> Result<TensorId, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(shape_err(
                "normalize_channels",
                format!("input must be [c,h,w], got {s:?}"),
            ));
        }
        let (c, n) = (s[0], s[1] * s[2]);
        let v = self.value(a);
        let mut out = vec![0.0; c * n];
        let mut kink = f64::INFINITY;
        for i in 0..n {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += v[ch * n + i];
            }
            kink = kink.min((sum - min_denom).abs());
            let denom = sum.max(min_denom);
            for ch in 0..c {
                out[ch * n + i] = v[ch * n + i] / denom;
            }
        }
        self.note_kink(kink);
        let needs = self.requires_grad(a);
        Ok(self.push(Op::NormalizeChannels { a, min_denom }, s, out, needs))
    }

    /// Forward-difference Jacobian determinant of a field `[h,w,2]` on the
    /// `(h-1) x (w-1)` cell grid.
    pub fn jacobian_det(&mut self, field: TensorId) -> Result<TensorId, AutodiffError> {
        let s = self.shape(field).to_vec();
        if s.len() != 3 || s[2] != 2 || s[0] < 2 || s[1] < 2 {
            return Err(shape_err(
                "jacobian_det",
                format!("field must be [h,w,2] with h,w >= 2, got {s:?}"),
            ));
        }
        let (h, w) = (s[0], s[1]);
        let mut out = vec![0.0; (h - 1) * (w - 1)];
        kernels::jacdet_fwd(self.value(field), h, w, &mut out);
        let needs = self.requires_grad(field);
        Ok(self.push(Op::JacobianDet { field }, vec![h - 1, w - 1], out, needs))
    }

    /// Mean squared forward-difference gradient of a displacement `[h,w,2]`
    /// (both components, both directions), as a scalar.
    pub fn gradsq_mean(&mut self, u: TensorId) -> Result<TensorId, AutodiffError> {
        let s = self.shape(u).to_vec();
        if s.len() != 3 || s[2] != 2 || s[0] < 2 || s[1] < 2 {
            return Err(shape_err(
                "gradsq_mean",
                format!("displacement must be [h,w,2] with h,w >= 2, got {s:?}"),
            ));
        }
        let v = kernels::gradsq_mean_fwd(self.value(u), s[0], s[1]);
        let needs = self.requires_grad(u);
        Ok(self.push(Op::GradSqMean { u }, vec![1], vec![v], needs))
    }

    /// Reorder `[2,h,w]` channel planes into interleaved `[h,w,2]` pairs.
    pub fn planes_to_pairs(&mut self, a: TensorId) -> Result<TensorId, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != 2 {
            return Err(shape_err("planes_to_pairs", format!("input must be [2,h,w], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let v = self.value(a);
        let n = h * w;
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            out[2 * i] = v[i];
            out[2 * i + 1] = v[n + i];
        }
        let needs = self.requires_grad(a);
        Ok(self.push(Op::PlanesToPairs { a }, vec![h, w, 2], out, needs))
    }

    // Bilinear weights only kink along the coordinate input; constant
    // coordinates leave the op linear in the sampled values.
    fn note_coord_kinks(&mut self, coords: TensorId) {
        if !self.requires_grad(coords) {
            return;
        }
        let mut kink = f64::INFINITY;
        for &v in self.value(coords) {
            let f = v - v.floor();
            kink = kink.min(f.min(1.0 - f));
        }
        self.note_kink(kink);
    }

    // ----------------------------------------------------------- backward --

    /// Accumulates gradients of the scalar `root` into every node that
    /// requires them. Fan-out adds; leaves keep their gradients for reading.
    /// With `free_intermediates`, value buffers of interior nodes are dropped
    /// as soon as backward has consumed them.
    pub fn backward(&mut self, root: TensorId, free_intermediates: bool) -> Result<(), AutodiffError> {
        if numel(self.shape(root)) != 1 {
            return Err(AutodiffError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.idx()] = Some(vec![1.0]);
        for i in (0..=root.idx()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if !is_leaf {
                self.backprop_node(i, &g, &mut grads);
                if free_intermediates {
                    self.nodes[i].data = Arc::new(Vec::new());
                }
            } else {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn ensure_grad<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: TensorId,
    ) -> &'a mut [f64] {
        let slot = &mut grads[id.idx()];
        if slot.is_none() {
            *slot = Some(vec![0.0; numel(&nodes[id.idx()].shape)]);
        }
        slot.as_deref_mut().unwrap()
    }

    fn backprop_node(&mut self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Take the op out to appease the borrow checker; it is put back at the
        // end. Node values are read through raw Arc clones.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_data = Arc::clone(&self.nodes[i].data);
        let nodes = &self.nodes;
        let val = |id: TensorId| -> &[f64] { &nodes[id.idx()].data };
        let shp = |id: TensorId| -> &[usize] { &nodes[id.idx()].shape };
        let wants = |id: TensorId| -> bool { nodes[id.idx()].needs_grad };
        match &op {
            Op::Leaf => unreachable!("leaves have no backward"),
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let is = shp(*input);
                let ws = shp(*weight);
                let (cin, h, w) = (is[0], is[1], is[2]);
                let (cout, k) = (ws[0], ws[2]);
                if wants(*input) {
                    let gi = Self::ensure_grad(grads, nodes, *input);
                    kernels::conv2d_bwd_input(g, cin, h, w, val(*weight), cout, k, *stride, *pad, gi);
                }
                if wants(*weight) || bias.is_some_and(wants) {
                    // split borrows: weight grad and bias grad live in
                    // different slots
                    if wants(*weight) {
                        let gw = Self::ensure_grad(grads, nodes, *weight);
                        kernels::conv2d_bwd_weight(
                            g, val(*input), cin, h, w, cout, k, *stride, *pad, gw, None,
                        );
                    }
                    if let Some(b) = bias {
                        if wants(*b) {
                            let oh = kernels::conv_out_len(h, k, *stride, *pad);
                            let ow = kernels::conv_out_len(w, k, *stride, *pad);
                            let gb = Self::ensure_grad(grads, nodes, *b);
                            for co in 0..cout {
                                gb[co] += kernels::sum_f64(&g[co * oh * ow..(co + 1) * oh * ow]);
                            }
                        }
                    }
                }
            }
            Op::ConstConvAdd { base, weight, bias, cvals } => {
                let bs = shp(*base);
                let (cout, h, w) = (bs[0], bs[1], bs[2]);
                if wants(*base) {
                    let gb = Self::ensure_grad(grads, nodes, *base);
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if wants(*weight) || bias.is_some_and(wants) {
                    let mut sums = Vec::with_capacity(cout);
                    for co in 0..cout {
                        sums.push(kernels::tap_region_sums(&g[co * h * w..(co + 1) * h * w], h, w));
                    }
                    if wants(*weight) {
                        let d = cvals.len();
                        let gw = Self::ensure_grad(grads, nodes, *weight);
                        for co in 0..cout {
                            for (j, &cv) in cvals.iter().enumerate() {
                                for t in 0..9 {
                                    gw[(co * d + j) * 9 + t] += cv * sums[co][t];
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        if wants(*b) {
                            let gbias = Self::ensure_grad(grads, nodes, *b);
                            for co in 0..cout {
                                gbias[co] += sums[co][4]; // center tap = full sum
                            }
                        }
                    }
                }
            }
            Op::GridSample { input, coords, pad } => {
                let is = shp(*input);
                let (c, h, w) = match is {
                    [h, w] => (1, *h, *w),
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                let n = g.len() / c;
                let want_i = wants(*input);
                let want_c = wants(*coords);
                // two mutable grad slots: obtain sequentially
                if want_i && want_c {
                    let mut gi_tmp = vec![0.0; c * h * w];
                    let mut gc_tmp = vec![0.0; 2 * n];
                    kernels::bilinear_sample_bwd(
                        val(*input), c, h, w, val(*coords), n, pad, g,
                        Some(&mut gi_tmp), Some(&mut gc_tmp),
                    );
                    let gi = Self::ensure_grad(grads, nodes, *input);
                    for (d, s) in gi.iter_mut().zip(&gi_tmp) {
                        *d += s;
                    }
                    let gc = Self::ensure_grad(grads, nodes, *coords);
                    for (d, s) in gc.iter_mut().zip(&gc_tmp) {
                        *d += s;
                    }
                } else if want_i {
                    let gi = Self::ensure_grad(grads, nodes, *input);
                    kernels::bilinear_sample_bwd(
                        val(*input), c, h, w, val(*coords), n, pad, g, Some(gi), None,
                    );
                } else if want_c {
                    let gc = Self::ensure_grad(grads, nodes, *coords);
                    kernels::bilinear_sample_bwd(
                        val(*input), c, h, w, val(*coords), n, pad, g, None, Some(gc),
                    );
                }
            }
            Op::SampleField { field, positions } => {
                let fs = shp(*field);
                let (h, w) = (fs[0], fs[1]);
                let n = g.len() / 2;
                let want_f = wants(*field);
                let want_p = wants(*positions);
                if want_f && want_p {
                    let mut gf_tmp = vec![0.0; h * w * 2];
                    let mut gp_tmp = vec![0.0; 2 * n];
                    kernels::sample_field_bwd(
                        val(*field), h, w, val(*positions), n, g,
                        Some(&mut gf_tmp), Some(&mut gp_tmp),
                    );
                    let gf = Self::ensure_grad(grads, nodes, *field);
                    for (d, s) in gf.iter_mut().zip(&gf_tmp) {
                        *d += s;
                    }
                    let gp = Self::ensure_grad(grads, nodes, *positions);
                    for (d, s) in gp.iter_mut().zip(&gp_tmp) {
                        *d += s;
                    }
                } else if want_f {
                    let gf = Self::ensure_grad(grads, nodes, *field);
                    kernels::sample_field_bwd(
                        val(*field), h, w, val(*positions), n, g, Some(gf), None,
                    );
                } else if want_p {
                    let gp = Self::ensure_grad(grads, nodes, *positions);
                    kernels::sample_field_bwd(
                        val(*field), h, w, val(*positions), n, g, None, Some(gp),
                    );
                }
            }
            Op::GaussianBlur { input, taps } => {
                if wants(*input) {
                    let is = shp(*input);
                    let (c, h, w) = match is {
                        [h, w] => (1, *h, *w),
                        [c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    let gi = Self::ensure_grad(grads, nodes, *input);
                    kernels::blur2d_adjoint(g, c, h, w, taps, gi);
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if wants(*id) {
                        let ga = Self::ensure_grad(grads, nodes, *id);
                        for (d, s) in ga.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if wants(*b) {
                    let gb = Self::ensure_grad(grads, nodes, *b);
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = val(*b);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * x;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = Self::ensure_grad(grads, nodes, *b);
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Div { a, b } => {
                if wants(*a) {
                    let bv = val(*b);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s / x;
                    }
                }
                if wants(*b) {
                    let bv = val(*b);
                    let gb = Self::ensure_grad(grads, nodes, *b);
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out_data[i] / bv[i];
                    }
                }
            }
            Op::AddScalar { a } => {
                if wants(*a) {
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::MulScalar { a, c } => {
                if wants(*a) {
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            Op::LeakyRelu { a, alpha } => {
                if wants(*a) {
                    let av = val(*a);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else { *alpha };
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let av = val(*a);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Abs { a } => {
                if wants(*a) {
                    let av = val(*a);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else if av[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Square { a } => {
                if wants(*a) {
                    let av = val(*a);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += 2.0 * g[i] * av[i];
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = numel(shp(p));
                    if wants(p) {
                        let gp = Self::ensure_grad(grads, nodes, p);
                        for (d, s) in gp.iter_mut().zip(&g[off..off + len]) {
                            *d += s;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceChannel { a, ch } => {
                if wants(*a) {
                    let n = g.len();
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for (d, s) in ga[ch * n..(ch + 1) * n].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Upsample2x { a, mode } => {
                if wants(*a) {
                    let s = shp(*a);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    match mode {
                        UpsampleMode::Nearest => kernels::upsample2x_nearest_bwd(g, c, h, w, ga),
                        UpsampleMode::Bilinear => kernels::upsample2x_bilinear_bwd(g, c, h, w, ga),
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if wants(*a) {
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    let s = g[0] / ga.len() as f64;
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::InstanceNorm { a, stats } => {
                if wants(*a) {
                    let s = shp(*a);
                    let (c, n) = (s[0], s[1] * s[2]);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    kernels::instance_norm_bwd(&out_data, c, n, stats, g, ga);
                }
            }
            Op::NormalizeChannels { a, min_denom } => {
                if wants(*a) {
                    let s = shp(*a);
                    let (c, n) = (s[0], s[1] * s[2]);
                    let av = val(*a);
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for i in 0..n {
                        let mut sum = 0.0;
                        for ch in 0..c {
                            sum += av[ch * n + i];
                        }
                        if sum > *min_denom {
                            let mut gdota = 0.0;
                            for ch in 0..c {
                                gdota += g[ch * n + i] * av[ch * n + i];
                            }
                            let inv = 1.0 / sum;
                            for ch in 0..c {
                                ga[ch * n + i] += g[ch * n + i] * inv - gdota * inv * inv;
                            }
                        } else {
                            let inv = 1.0 / *min_denom;
                            for ch in 0..c {
                                ga[ch * n + i] += g[ch * n + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::JacobianDet { field } => {
                if wants(*field) {
                    let s = shp(*field);
                    let fv = val(*field);
                    let gf = Self::ensure_grad(grads, nodes, *field);
                    kernels::jacdet_bwd(fv, s[0], s[1], g, gf);
                }
            }
            Op::GradSqMean { u } => {
                if wants(*u) {
                    let s = shp(*u);
                    let uv = val(*u);
                    let gu = Self::ensure_grad(grads, nodes, *u);
                    kernels::gradsq_mean_bwd(uv, s[0], s[1], g[0], gu);
                }
            }
            Op::PlanesToPairs { a } => {
                if wants(*a) {
                    let n = g.len() / 2;
                    let ga = Self::ensure_grad(grads, nodes, *a);
                    for i in 0..n {
                        ga[i] += g[2 * i];
                        ga[n + i] += g[2 * i + 1];
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}
