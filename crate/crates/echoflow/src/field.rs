//! Deformation fields, label masks, and differentiable warping.
//!
//! A deformation field stores, for every target pixel, the absolute source
//! coordinate `(col, row)` it reads from; warping is backward sampling of the
//! source image at those coordinates. Masks exist in two forms: hard integer
//! labels for I/O and metrics, and one-hot float channels (channel 0 =
//! background) for everything that needs gradients.

use crate::autodiff::{AutodiffError, SamplePad, Tape, TensorId};

/// Integer-labeled segmentation map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub labels: Vec<u8>,
    pub h: usize,
    pub w: usize,
}

impl LabelMask {
    pub fn new(labels: Vec<u8>, h: usize, w: usize) -> Self {
        assert_eq!(labels.len(), h * w);
        Self { labels, h, w }
    }

    /// Number of pixels carrying class `k`.
    pub fn class_area(&self, k: u8) -> usize {
        self.labels.iter().filter(|&&v| v == k).count()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// One-hot float encoding of a label mask, `[K,H,W]` planes summing to 1 per
/// pixel.
#[derive(Clone, Debug)]
pub struct OneHotMask {
    pub data: Vec<f64>,
    pub classes: usize,
    pub h: usize,
    pub w: usize,
}

impl OneHotMask {
    pub fn from_labels(mask: &LabelMask, classes: usize) -> Self {
        assert!(classes > usize::from(mask.max_label()));
        let n = mask.h * mask.w;
        let mut data = vec![0.0; classes * n];
        for (i, &l) in mask.labels.iter().enumerate() {
            data[usize::from(l) * n + i] = 1.0;
        }
        Self { data, classes, h: mask.h, w: mask.w }
    }

    /// Soft area (channel sum) of class `k`.
    pub fn area(&self, k: usize) -> f64 {
        let n = self.h * self.w;
        crate::autodiff::kernels::sum_f64(&self.data[k * n..(k + 1) * n])
    }
}

/// Per-pixel argmax over channel planes; ties break toward the lowest index.
pub fn hard_labels(channels: &[f64], classes: usize, h: usize, w: usize) -> LabelMask {
    let n = h * w;
    assert_eq!(channels.len(), classes * n);
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_v = channels[i];
        for k in 1..classes {
            let v = channels[k * n + i];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        labels[i] = best as u8;
    }
    LabelMask::new(labels, h, w)
}

/// Identity sampling grid: entry (r,c) = (c, r), interleaved `[h,w,2]`.
pub fn identity_grid(h: usize, w: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            g.push(c as f64);
            g.push(r as f64);
        }
    }
    g
}

/// Deformation field at one time point: absolute source coordinates per
/// target pixel.
#[derive(Clone, Debug)]
pub struct DeformationField {
    pub phi: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub time: f64,
}

impl DeformationField {
    pub fn new(phi: Vec<f64>, h: usize, w: usize, time: f64) -> Self {
        assert_eq!(phi.len(), h * w * 2);
        Self { phi, h, w, time }
    }

    pub fn identity(h: usize, w: usize, time: f64) -> Self {
        Self { phi: identity_grid(h, w), h, w, time }
    }

    /// Displacement u = phi - identity.
    pub fn displacement(&self) -> Vec<f64> {
        let id = identity_grid(self.h, self.w);
        self.phi.iter().zip(&id).map(|(p, q)| p - q).collect()
    }

    /// Forward-difference Jacobian determinant on the (h-1)x(w-1) cell grid.
    pub fn jacobian_determinant(&self) -> Vec<f64> {
        let mut out = vec![0.0; (self.h - 1) * (self.w - 1)];
        crate::autodiff::kernels::jacdet_fwd(&self.phi, self.h, self.w, &mut out);
        out
    }
}

fn check_spatial(
    op: &'static str,
    tape: &Tape,
    a: TensorId,
    field: TensorId,
) -> Result<(usize, usize), AutodiffError> {
    let fs = tape.shape(field).to_vec();
    let as_ = tape.shape(a).to_vec();
    let (h, w) = match as_.as_slice() {
        [_, h, w] | [h, w] => (*h, *w),
        _ => {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("expected image/mask shape, got {as_:?}"),
            })
        }
    };
    if fs != [h, w, 2] {
        return Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("field {fs:?} does not match spatial size [{h},{w},2]"),
        });
    }
    Ok((h, w))
}

/// Backward-warp an image by a deformation field; out-of-domain samples read
/// as 0.
pub fn warp_image(
    tape: &mut Tape,
    image: TensorId,
    field: TensorId,
) -> Result<TensorId, AutodiffError> {
    check_spatial("warp_image", tape, image, field)?;
    tape.grid_sample(image, field, SamplePad::Uniform(0.0))
}

/// Backward-warp a one-hot mask `[k,h,w]`: each channel sampled bilinearly,
/// out-of-domain contributing to the background channel, then renormalized to
/// sum 1 per pixel.
pub fn warp_mask(
    tape: &mut Tape,
    mask: TensorId,
    field: TensorId,
) -> Result<TensorId, AutodiffError> {
    check_spatial("warp_mask", tape, mask, field)?;
    let classes = tape.shape(mask)[0];
    let mut pad = vec![0.0; classes];
    pad[0] = 1.0;
    let warped = tape.grid_sample(mask, field, SamplePad::PerChannel(pad))?;
    tape.normalize_channels(warped, 1e-12)
}
