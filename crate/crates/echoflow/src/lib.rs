//! Per-sequence diffeomorphic motion fitting for echocardiographic image
//! sequences.
//!
//! Given a grayscale image sequence and segmentation masks for the first and
//! last frames, a time-dependent velocity field is optimized at test time so
//! that its flow warps the first frame onto every later frame. Masks are then
//! propagated through the fitted flow, yielding a dense, temporally coherent
//! segmentation of the whole sequence plus invertible deformation fields.
//!
//! Module map:
//!
//! * [`autodiff`]   reverse-mode tape over dense f64 tensors (conv, sampling,
//!   blur, reductions) with finite-difference checking
//! * [`mask`]       label masks and one-hot soft masks
//! * [`sequence`]   in-memory image sequences
//! * [`field`]      deformation fields, warping, Jacobians
//! * [`flow`]       Euler integration of velocity fields over a time grid
//! * [`model`]      the velocity network and the dense-grid baseline
//! * [`loss`]       similarity, overlap, volume-ratio and regularity terms
//! * [`fit`]        Adam loop driving the per-sequence optimization
//! * [`metrics`]    Dice, Hausdorff, ejection fraction, shape attributes
//! * [`phantom`]    synthetic contracting-ellipse sequences with ground truth
//! * [`io`]         on-disk formats (sequence dirs, field dumps, overlays)
//! * [`cli`]        the `echoflow` command-line entry points

pub mod autodiff;
pub mod cli;
pub mod field;
pub mod fit;
pub mod flow;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod sequence;
