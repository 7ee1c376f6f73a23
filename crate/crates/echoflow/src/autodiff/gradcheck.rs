//! Central finite-difference verification of tape gradients.
//!
//! A probe perturbs one leaf coordinate by `+/- step`, rebuilds the graph,
//! and compares `(f(x+s) - f(x-s)) / 2s` against the analytic gradient.
//! Probes whose evaluations pass within `kink_margin` of a nonsmooth point
//! (relu/abs zero crossings, bilinear cell boundaries) are excluded: the
//! two-sided difference straddles a derivative jump there and measures
//! nothing. Relative error uses `|num - ana| / max(|num|, |ana|, 1)` so
//! near-zero gradients are compared absolutely.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::SamplePad;
use super::tape::{AutodiffError, Tape, TensorId, UpsampleMode};

pub struct GradCheckOpts {
    /// Central difference step.
    pub step: f64,
    /// Coordinates probed per leaf; leaves at most this large are probed
    /// exhaustively, larger ones are sampled.
    pub max_coords_per_leaf: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Probes whose evaluations report a kink closer than this are skipped.
    /// Zero disables skipping.
    pub kink_margin: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts { step: 1e-5, max_coords_per_leaf: 8, seed: 0, kink_margin: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Checks the gradient of the scalar built by `build` w.r.t. every leaf.
///
/// `build` gets a fresh tape and leaf ids for `leaves` (shape, data) in
/// order, and must return the scalar root. It is re-invoked for every
/// finite-difference evaluation, so it must be a pure function of the leaf
/// values.
pub fn grad_check(
    leaves: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId, AutodiffError>,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport, AutodiffError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> =
        leaves.iter().map(|(s, d)| tape.leaf(s, d.clone(), true)).collect();
    let root = build(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(AutodiffError::NonScalarRoot(tape.shape(root).to_vec()));
    }
    tape.backward(root, false)?;
    let base_kink = tape.min_kink_distance();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map_or_else(|| vec![0.0; tape.value(id).len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for (li, (_, data)) in leaves.iter().enumerate() {
        let n = data.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_leaf {
            (0..n).collect()
        } else {
            let mut cs = Vec::with_capacity(opts.max_coords_per_leaf);
            while cs.len() < opts.max_coords_per_leaf {
                let c = rng.gen_range(0..n);
                if !cs.contains(&c) {
                    cs.push(c);
                }
            }
            cs
        };
        for c in coords {
            let eval = |delta: f64| -> Result<(f64, f64), AutodiffError> {
                let mut t = Tape::new();
                let ids2: Vec<TensorId> = leaves
                    .iter()
                    .enumerate()
                    .map(|(lj, (s, d))| {
                        let mut dd = d.clone();
                        if lj == li {
                            dd[c] += delta;
                        }
                        t.leaf(s, dd, false)
                    })
                    .collect();
                let r = build(&mut t, &ids2)?;
                Ok((t.scalar(r), t.min_kink_distance()))
            };
            let (fp, kp) = eval(opts.step)?;
            let (fm, km) = eval(-opts.step)?;
            if opts.kink_margin > 0.0 && base_kink.min(kp).min(km) < opts.kink_margin {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let ana = analytic[li][c];
            let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Uniform values with |x| in [0.1, 1), bounded away from elementwise kinks.
fn rand_signed(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            s * rng.gen_range(0.1..1.0)
        })
        .collect()
}

fn rand_unif(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Sampling positions around a domain of size `extent`, with fractional part
/// in [0.1, 0.9] so no probe sits near a cell boundary. Integer parts range
/// past both ends to exercise padding.
fn rand_coords(rng: &mut ChaCha8Rng, n: usize, extent: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-2..extent as i64 + 1) as f64 + rng.gen_range(0.1..0.9))
        .collect()
}

/// Runs the finite-difference check once per tape op, with input data
/// constructed to stay away from kinks so no probe is skipped spuriously.
pub fn check_all_ops(seed: u64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<OpCheck> = Vec::new();
    let opts = GradCheckOpts { seed, ..GradCheckOpts::default() };

    {
        let leaves = vec![
            (vec![3, 6, 7], rand_signed(&mut rng, 3 * 6 * 7)),
            (vec![4, 3, 3, 3], rand_signed(&mut rng, 4 * 3 * 3 * 3)),
            (vec![4], rand_signed(&mut rng, 4)),
        ];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                Ok(t.sum(c))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "conv2d_3x3", report });
    }
    {
        let leaves =
            vec![(vec![2, 7, 7], rand_signed(&mut rng, 2 * 7 * 7)), (vec![3, 2, 3, 3], rand_signed(&mut rng, 3 * 2 * 3 * 3))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], None, 2, 1)?;
                Ok(t.sum(c))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "conv2d_stride2", report });
    }
    {
        let leaves = vec![
            (vec![3, 5, 5], rand_signed(&mut rng, 3 * 5 * 5)),
            (vec![2, 3, 1, 1], rand_signed(&mut rng, 2 * 3)),
            (vec![2], rand_signed(&mut rng, 2)),
        ];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0)?;
                Ok(t.sum(c))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "conv2d_1x1", report });
    }
    {
        let cvals = Arc::new(rand_signed(&mut rng, 3));
        let leaves = vec![
            (vec![4, 5, 6], rand_signed(&mut rng, 4 * 5 * 6)),
            (vec![4, 3, 3, 3], rand_signed(&mut rng, 4 * 3 * 3 * 3)),
            (vec![4], rand_signed(&mut rng, 4)),
        ];
        let report = grad_check(
            &leaves,
            move |t, ids| {
                let c = t.const_conv_add(ids[0], ids[1], Some(ids[2]), Arc::clone(&cvals))?;
                let sq = t.square(c);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "const_conv_add", report });
    }

    for (name, pad) in [
        ("grid_sample_const", SamplePad::Uniform(0.3)),
        ("grid_sample_per_channel", SamplePad::PerChannel(vec![0.2, -0.4])),
        ("grid_sample_border", SamplePad::Border),
    ] {
        let leaves = vec![(vec![2, 5, 6], rand_signed(&mut rng, 2 * 5 * 6)), (vec![3, 4, 2], rand_coords(&mut rng, 3 * 4 * 2, 6))];
        let padc = pad.clone();
        let report = grad_check(
            &leaves,
            move |t, ids| {
                let s = t.grid_sample(ids[0], ids[1], padc.clone())?;
                let sq = t.square(s);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name, report });
    }
    {
        let leaves = vec![(vec![5, 6, 2], rand_signed(&mut rng, 5 * 6 * 2)), (vec![4, 3, 2], rand_coords(&mut rng, 4 * 3 * 2, 6))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let s = t.sample_field(ids[0], ids[1])?;
                let sq = t.square(s);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "sample_field", report });
    }
    {
        let leaves = vec![(vec![2, 7, 6], rand_signed(&mut rng, 2 * 7 * 6))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let b = t.gaussian_blur(ids[0], 1.0)?;
                let sq = t.square(b);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "gaussian_blur", report });
    }

    fn pair(rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<f64>)> {
        vec![(vec![2, 3, 4], rand_signed(rng, 24)), (vec![2, 3, 4], rand_signed(rng, 24))]
    }
    {
        let leaves = pair(&mut rng);
        let report = grad_check(
            &leaves,
            |t, ids| {
                let x = t.add(ids[0], ids[1])?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "add", report });
    }
    {
        let leaves = pair(&mut rng);
        let report = grad_check(
            &leaves,
            |t, ids| {
                let x = t.sub(ids[0], ids[1])?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "sub", report });
    }
    {
        let leaves = pair(&mut rng);
        let report = grad_check(
            &leaves,
            |t, ids| {
                let x = t.mul(ids[0], ids[1])?;
                Ok(t.sum(x))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "mul", report });
    }
    {
        let num = rand_signed(&mut rng, 24);
        let den = rand_unif(&mut rng, 24, 0.7, 1.8);
        let leaves = vec![(vec![2, 3, 4], num), (vec![2, 3, 4], den)];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let x = t.div(ids[0], ids[1])?;
                Ok(t.sum(x))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "div", report });
    }
    {
        let leaves = vec![(vec![3, 4], rand_signed(&mut rng, 12))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let a = t.add_scalar(ids[0], 0.7);
                let m = t.mul_scalar(a, -1.3);
                let sq = t.square(m);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "add_mul_scalar", report });
    }
    for (name, which) in [("leaky_relu", 0), ("relu", 1), ("abs", 2), ("square", 3)] {
        let leaves = vec![(vec![3, 5, 4], rand_signed(&mut rng, 3 * 5 * 4))];
        let report = grad_check(
            &leaves,
            move |t, ids| {
                let x = match which {
                    0 => t.leaky_relu(ids[0], 0.2),
                    1 => t.relu(ids[0]),
                    2 => t.abs(ids[0]),
                    _ => t.square(ids[0]),
                };
                Ok(t.sum(x))
            },
            &opts,
        )?;
        cases.push(OpCheck { name, report });
    }
    {
        let leaves = vec![
            (vec![1, 4, 5], rand_signed(&mut rng, 20)),
            (vec![2, 4, 5], rand_signed(&mut rng, 40)),
            (vec![3, 4, 5], rand_signed(&mut rng, 60)),
        ];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let c = t.concat(ids)?;
                let sq = t.square(c);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "concat", report });
    }
    {
        let leaves = vec![(vec![3, 4, 5], rand_signed(&mut rng, 60))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let c = t.slice_channel(ids[0], 1)?;
                let sq = t.square(c);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "slice_channel", report });
    }
    for (name, mode) in [
        ("upsample2x_nearest", UpsampleMode::Nearest),
        ("upsample2x_bilinear", UpsampleMode::Bilinear),
    ] {
        let leaves = vec![(vec![2, 3, 4], rand_signed(&mut rng, 24))];
        let report = grad_check(
            &leaves,
            move |t, ids| {
                let u = t.upsample2x(ids[0], mode)?;
                let sq = t.square(u);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name, report });
    }
    {
        let leaves = vec![(vec![3, 5], rand_signed(&mut rng, 15))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let sq = t.square(ids[0]);
                Ok(t.mean(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "mean", report });
    }
    {
        let leaves = vec![(vec![3, 6, 5], rand_signed(&mut rng, 90))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let x = t.instance_norm(ids[0], 1e-5)?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "instance_norm", report });
    }
    {
        let data = rand_unif(&mut rng, 48, 0.2, 1.0);
        let leaves = vec![(vec![3, 4, 4], data)];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let x = t.normalize_channels(ids[0], 1e-12)?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "normalize_channels", report });
    }
    {
        let leaves = vec![(vec![5, 6, 2], rand_signed(&mut rng, 60))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let d = t.jacobian_det(ids[0])?;
                let sq = t.square(d);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "jacobian_det", report });
    }
    {
        let leaves = vec![(vec![5, 6, 2], rand_signed(&mut rng, 60))];
        let report = grad_check(&leaves, |t, ids| t.gradsq_mean(ids[0]), &opts)?;
        cases.push(OpCheck { name: "gradsq_mean", report });
    }
    {
        let leaves = vec![(vec![2, 4, 5], rand_signed(&mut rng, 40))];
        let report = grad_check(
            &leaves,
            |t, ids| {
                let p = t.planes_to_pairs(ids[0])?;
                let sq = t.square(p);
                Ok(t.sum(sq))
            },
            &opts,
        )?;
        cases.push(OpCheck { name: "planes_to_pairs", report });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        let cases = check_all_ops(1234).unwrap();
        assert!(cases.len() >= 20);
        for c in cases {
            assert!(c.report.checked > 0, "{}: no probes ran", c.name);
            assert!(
                c.report.max_rel_err < 1e-5,
                "{}: rel err {} (checked {}, skipped {})",
                c.name,
                c.report.max_rel_err,
                c.report.checked,
                c.report.skipped
            );
        }
    }

    #[test]
    fn probe_at_relu_kink_is_excluded() {
        let leaves = vec![(vec![1], vec![0.0])];
        let report = grad_check(
            &leaves,
            |t, ids| Ok(t.relu(ids[0])),
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn disabling_the_margin_probes_everything() {
        let leaves = vec![(vec![3], vec![0.5, -0.25, 2.0])];
        let opts = GradCheckOpts { kink_margin: 0.0, ..GradCheckOpts::default() };
        let report = grad_check(
            &leaves,
            |t, ids| {
                let r = t.leaky_relu(ids[0], 0.2);
                Ok(t.sum(r))
            },
            &opts,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-9);
    }
}
