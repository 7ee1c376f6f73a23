//! Euler integration of a time-dependent velocity field into deformation
//! fields, forward and inverse.
//!
//! The solver grid is the union of the uniform Euler steps and the frame
//! times, so frame fields are exact solver states rather than interpolants.
//! Integration happens on the autodiff tape; fitting differentiates through
//! every step.

use crate::autodiff::{AutodiffError, Tape, TensorId};
use crate::field::identity_grid;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("time grid: {0}")]
    BadGrid(String),
    #[error("time {0} is not a grid point")]
    OffGrid(f64),
}

/// Sorted solver times (union of Euler multiples and frame times) plus the
/// grid position of every frame time.
#[derive(Clone, Debug)]
pub struct TimeGrid {
    times: Vec<f64>,
    frame_pos: Vec<usize>,
}

impl TimeGrid {
    /// Merge Euler multiples of `h` with explicit frame times; points closer
    /// than 1e-12 collapse onto the frame time.
    pub fn build(frame_times: &[f64], h: f64) -> Result<Self, FlowError> {
        if frame_times.len() < 2 {
            return Err(FlowError::BadGrid(format!(
                "need at least 2 frame times, got {}",
                frame_times.len()
            )));
        }
        if !(h > 0.0 && h <= 1.0) {
            return Err(FlowError::BadGrid(format!("step size {h} outside (0, 1]")));
        }
        if frame_times[0] != 0.0 || *frame_times.last().unwrap() != 1.0 {
            return Err(FlowError::BadGrid("frame times must span [0, 1]".into()));
        }
        if frame_times.windows(2).any(|p| p[1] <= p[0]) {
            return Err(FlowError::BadGrid("frame times must be strictly increasing".into()));
        }
        let mut times = Vec::new();
        let mut k = 0u32;
        loop {
            let t = f64::from(k) * h;
            if t >= 1.0 - 1e-12 {
                break;
            }
            times.push(t);
            k += 1;
        }
        times.push(1.0);
        for &ft in frame_times {
            match times.iter().position(|&p| (p - ft).abs() <= 1e-12) {
                Some(i) => times[i] = ft,
                None => times.push(ft),
            }
        }
        times.sort_by(f64::total_cmp);
        let frame_pos = frame_times
            .iter()
            .map(|&ft| times.iter().position(|&p| p == ft).unwrap())
            .collect();
        Ok(Self { times, frame_pos })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Grid index of each frame time, ascending.
    pub fn frame_positions(&self) -> &[usize] {
        &self.frame_pos
    }

    pub fn num_frames(&self) -> usize {
        self.frame_pos.len()
    }

    fn position_of(&self, t: f64) -> Result<usize, FlowError> {
        self.times
            .iter()
            .position(|&p| (p - t).abs() <= 1e-12)
            .ok_or(FlowError::OffGrid(t))
    }
}

/// Uniform frame times i/(n-1) merged with Euler multiples of `h`.
pub fn build_time_grid(num_frames: usize, h: f64) -> Result<TimeGrid, FlowError> {
    if num_frames < 2 {
        return Err(FlowError::BadGrid(format!("need at least 2 frames, got {num_frames}")));
    }
    let times: Vec<f64> =
        (0..num_frames).map(|i| i as f64 / (num_frames - 1) as f64).collect();
    TimeGrid::build(&times, h)
}

/// Source of velocity fields `[h,w,2]` at arbitrary solver times. `evaluate`
/// may cache tape nodes, hence `&mut self`; it must be deterministic for
/// fixed parameters and `s`.
pub trait VelocityProvider {
    fn extent(&self) -> (usize, usize);
    fn evaluate(&mut self, tape: &mut Tape, s: f64) -> Result<TensorId, AutodiffError>;
}

/// Provider from a plain closure producing field values; used by tests,
/// examples, and oracles.
pub struct FnProvider<F: Fn(f64) -> Vec<f64>> {
    pub h: usize,
    pub w: usize,
    pub f: F,
}

impl<F: Fn(f64) -> Vec<f64>> VelocityProvider for FnProvider<F> {
    fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn evaluate(&mut self, tape: &mut Tape, s: f64) -> Result<TensorId, AutodiffError> {
        Ok(tape.leaf(&[self.h, self.w, 2], (self.f)(s), false))
    }
}

/// Index of the frame time nearest to `s`; ties break toward the earlier
/// frame.
pub fn nearest_frame(frame_times: &[f64], s: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &ft) in frame_times.iter().enumerate() {
        let d = (ft - s).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Left-endpoint Euler: phi(s_{k+1}) = phi(s_k) + ds * V(phi(s_k), s_k),
/// starting from the identity. Returns the field at every frame time, in
/// frame order.
pub fn integrate_forward(
    provider: &mut dyn VelocityProvider,
    grid: &TimeGrid,
    tape: &mut Tape,
) -> Result<Vec<TensorId>, AutodiffError> {
    let (h, w) = provider.extent();
    let mut phi = tape.leaf(&[h, w, 2], identity_grid(h, w), false);
    let times = grid.times();
    let mut out = Vec::with_capacity(grid.num_frames());
    let mut next = 0;
    for k in 0..times.len() {
        if next < grid.frame_pos.len() && grid.frame_pos[next] == k {
            out.push(phi);
            next += 1;
        }
        if k + 1 == times.len() {
            break;
        }
        let v = provider.evaluate(tape, times[k])?;
        let sampled = tape.sample_field(v, phi)?;
        let step = tape.mul_scalar(sampled, times[k + 1] - times[k]);
        phi = tape.add(phi, step)?;
    }
    debug_assert_eq!(out.len(), grid.num_frames());
    Ok(out)
}

/// Integrate -V from `t` back to 0, approximating the inverse field at `t`.
pub fn integrate_inverse(
    provider: &mut dyn VelocityProvider,
    grid: &TimeGrid,
    t: f64,
    tape: &mut Tape,
) -> Result<TensorId, FlowIntegrateError> {
    let pos = grid.position_of(t)?;
    let (h, w) = provider.extent();
    let mut phi = tape.leaf(&[h, w, 2], identity_grid(h, w), false);
    for k in (1..=pos).rev() {
        let s = grid.times[k];
        let ds = s - grid.times[k - 1];
        let v = provider.evaluate(tape, s)?;
        let sampled = tape.sample_field(v, phi)?;
        let step = tape.mul_scalar(sampled, -ds);
        phi = tape.add(phi, step)?;
    }
    Ok(phi)
}

#[derive(Debug, Error)]
pub enum FlowIntegrateError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels;

    #[test]
    fn grid_examples_from_coinciding_and_interleaved_times() {
        let g = build_time_grid(2, 0.5).unwrap();
        assert_eq!(g.times(), &[0.0, 0.5, 1.0]);
        assert_eq!(g.frame_positions(), &[0, 2]);

        let g = build_time_grid(11, 0.1).unwrap();
        assert_eq!(g.times().len(), 11);

        let g = build_time_grid(3, 0.1).unwrap();
        assert_eq!(g.times().len(), 11);
        assert_eq!(g.frame_positions(), &[0, 5, 10]);
        assert_eq!(g.times()[5], 0.5);

        // 10 frames at i/9 share only the endpoints with multiples of 0.1
        let g = build_time_grid(10, 0.1).unwrap();
        assert_eq!(g.times().len(), 19);
    }

    #[test]
    fn zero_velocity_integrates_to_bitwise_identity() {
        let grid = build_time_grid(4, 0.1).unwrap();
        let mut p = FnProvider { h: 6, w: 5, f: |_| vec![0.0; 60] };
        let mut tape = Tape::new();
        let fields = integrate_forward(&mut p, &grid, &mut tape).unwrap();
        assert_eq!(fields.len(), 4);
        let id = identity_grid(6, 5);
        for f in fields {
            assert_eq!(tape.value(f), &id[..]);
        }
    }

    #[test]
    fn constant_velocity_is_integrated_exactly() {
        let (h, w) = (5, 7);
        let v: Vec<f64> = (0..h * w).flat_map(|_| [0.8, -0.3]).collect();
        let grid = build_time_grid(5, 0.1).unwrap();
        let vc = v.clone();
        let mut p = FnProvider { h, w, f: move |_| vc.clone() };
        let mut tape = Tape::new();
        let fields = integrate_forward(&mut p, &grid, &mut tape).unwrap();
        let id = identity_grid(h, w);
        for (i, f) in fields.iter().enumerate() {
            let t = i as f64 / 4.0;
            for (j, got) in tape.value(*f).iter().enumerate() {
                let want = id[j] + t * v[j];
                assert!((got - want).abs() < 1e-12, "t={t} j={j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rotation_field_matches_fine_step_oracle() {
        // stationary rigid rotation, 0.2 rad per unit time about the center
        let (h, w) = (64, 64);
        let (cx, cy) = (31.5, 31.5);
        let omega = 0.2;
        let mut v = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                v.push(-omega * (y as f64 - cy));
                v.push(omega * (x as f64 - cx));
            }
        }
        let grid = build_time_grid(2, 0.1).unwrap();
        let vc = v.clone();
        let mut p = FnProvider { h, w, f: move |_| vc.clone() };
        let mut tape = Tape::new();
        let phi1 = *integrate_forward(&mut p, &grid, &mut tape).unwrap().last().unwrap();

        // oracle: the same clamped-sampling dynamics at step 1e-4
        let n = h * w;
        let mut pos = identity_grid(h, w);
        let mut vel = vec![0.0; 2 * n];
        let dt = 1e-4;
        for _ in 0..10_000 {
            kernels::sample_field_fwd(&v, h, w, &pos, n, &mut vel);
            for (p, dv) in pos.iter_mut().zip(&vel) {
                *p += dt * dv;
            }
        }
        let got = tape.value(phi1);
        let mean_err: f64 = got
            .chunks(2)
            .zip(pos.chunks(2))
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / n as f64;
        assert!(mean_err < 0.1, "mean displacement error {mean_err} px");
    }

    #[test]
    fn inverse_of_constant_velocity_subtracts_displacement() {
        let (h, w) = (4, 4);
        let v: Vec<f64> = (0..h * w).flat_map(|_| [0.5, 0.25]).collect();
        let grid = build_time_grid(3, 0.25).unwrap();
        let vc = v.clone();
        let mut p = FnProvider { h, w, f: move |_| vc.clone() };
        let mut tape = Tape::new();
        let inv = integrate_inverse(&mut p, &grid, 0.5, &mut tape).unwrap();
        let id = identity_grid(h, w);
        for (j, got) in tape.value(inv).iter().enumerate() {
            let want = id[j] - 0.5 * v[j];
            assert!((got - want).abs() < 1e-12);
        }

        let mut z = FnProvider { h, w, f: |_| vec![0.0; 32] };
        let mut tape = Tape::new();
        let inv = integrate_inverse(&mut z, &grid, 1.0, &mut tape).unwrap();
        assert_eq!(tape.value(inv), &identity_grid(h, w)[..]);

        assert!(matches!(
            integrate_inverse(&mut z, &grid, 0.3, &mut Tape::new()),
            Err(FlowIntegrateError::Flow(FlowError::OffGrid(_)))
        ));
    }

    #[test]
    fn gradient_flows_through_the_integration() {
        use crate::autodiff::{grad_check, GradCheckOpts};
        struct ParamField(TensorId);
        impl VelocityProvider for ParamField {
            fn extent(&self) -> (usize, usize) {
                (4, 4)
            }
            fn evaluate(&mut self, _t: &mut Tape, _s: f64) -> Result<TensorId, AutodiffError> {
                Ok(self.0)
            }
        }
        // keep sampled positions clear of bilinear cell boundaries: x
        // offsets in [0.2, 0.35], y offsets in [-0.3, -0.2]
        let vals: Vec<f64> = (0..16)
            .flat_map(|i| [0.2 + 0.15 * i as f64 / 16.0, -0.2 - 0.1 * ((i * 3 % 7) as f64 / 7.0)])
            .collect();
        let grid = build_time_grid(3, 0.25).unwrap();
        let report = grad_check(
            &[(vec![4, 4, 2], vals)],
            |tape, leaves| {
                let mut p = ParamField(leaves[0]);
                let fields = integrate_forward(&mut p, &grid, tape)?;
                let last = *fields.last().unwrap();
                Ok(tape.mean(last))
            },
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn nearest_frame_prefers_the_earlier_on_ties() {
        let ft = [0.0, 0.5, 1.0];
        assert_eq!(nearest_frame(&ft, 0.2), 0);
        assert_eq!(nearest_frame(&ft, 0.25), 0);
        assert_eq!(nearest_frame(&ft, 0.26), 1);
        assert_eq!(nearest_frame(&ft, 0.75), 1);
        assert_eq!(nearest_frame(&ft, 0.9), 2);
    }
}
