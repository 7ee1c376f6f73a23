//! Dense f64 numeric kernels behind the tape ops.
//!
//! Everything here is single-threaded and runs in a fixed evaluation order,
//! so results are bitwise reproducible for identical inputs. Reductions use a
//! fixed 4-lane split (see [`sum_f64`]) rather than naive sequential sums;
//! the lane association is part of the defined behavior.
//!
//! Layout conventions: feature maps are `[C, H, W]` row-major planes;
//! deformation fields and sampling positions are `[H, W, 2]` with the two
//! components interleaved as `(x, y)` = `(col, row)`.

use super::par;

/// Sum with a fixed 4-lane split. Deterministic and autovectorizable.
pub fn sum_f64(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut tail = 0.0;
    for &v in chunks.remainder() {
        tail += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dot product with the same fixed 4-lane split as [`sum_f64`].
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn axpy(dst: &mut [f64], a: f64, xs: &[f64]) {
    debug_assert_eq!(dst.len(), xs.len());
    for (d, x) in dst.iter_mut().zip(xs) {
        *d += a * x;
    }
}

// ---------------------------------------------------------------- conv2d --

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// 3x3 stencil accumulation into one output plane: `out += stencil(inp, w9)`
/// with zero padding of one pixel. Interior rows are processed in pairs so
/// each loaded input row feeds two output rows; a shared zeros row stands in
/// for out-of-range rows, keeping the inner loops uniform.
fn stencil3_accum(out: &mut [f64], inp: &[f64], h: usize, w: usize, k: &[f64; 9]) {
    debug_assert_eq!(out.len(), h * w);
    debug_assert_eq!(inp.len(), h * w);
    if w < 3 {
        stencil3_accum_narrow(out, inp, h, w, k);
        return;
    }
    let zeros = vec![0.0f64; w];
    let e = w - 1;
    let mut y = 0;
    while y + 2 <= h {
        let ra = if y > 0 { &inp[(y - 1) * w..y * w] } else { &zeros[..w] };
        let rm = &inp[y * w..(y + 1) * w];
        let rb = &inp[(y + 1) * w..(y + 2) * w];
        let rc = if y + 2 < h { &inp[(y + 2) * w..(y + 3) * w] } else { &zeros[..w] };
        let (o0, o1) = out[y * w..(y + 2) * w].split_at_mut(w);
        for x in 1..e {
            let a0 = ra[x - 1];
            let a1 = ra[x];
            let a2 = ra[x + 1];
            let m0 = rm[x - 1];
            let m1 = rm[x];
            let m2 = rm[x + 1];
            let b0 = rb[x - 1];
            let b1 = rb[x];
            let b2 = rb[x + 1];
            let c0 = rc[x - 1];
            let c1 = rc[x];
            let c2 = rc[x + 1];
            o0[x] += k[0] * a0 + k[1] * a1 + k[2] * a2 + k[3] * m0 + k[4] * m1 + k[5] * m2
                + k[6] * b0 + k[7] * b1 + k[8] * b2;
            o1[x] += k[0] * m0 + k[1] * m1 + k[2] * m2 + k[3] * b0 + k[4] * b1 + k[5] * b2
                + k[6] * c0 + k[7] * c1 + k[8] * c2;
        }
        o0[0] += k[1] * ra[0] + k[2] * ra[1] + k[4] * rm[0] + k[5] * rm[1] + k[7] * rb[0]
            + k[8] * rb[1];
        o1[0] += k[1] * rm[0] + k[2] * rm[1] + k[4] * rb[0] + k[5] * rb[1] + k[7] * rc[0]
            + k[8] * rc[1];
        o0[e] += k[0] * ra[e - 1] + k[1] * ra[e] + k[3] * rm[e - 1] + k[4] * rm[e]
            + k[6] * rb[e - 1] + k[7] * rb[e];
        o1[e] += k[0] * rm[e - 1] + k[1] * rm[e] + k[3] * rb[e - 1] + k[4] * rb[e]
            + k[6] * rc[e - 1] + k[7] * rc[e];
        y += 2;
    }
    if y < h {
        let ra = if y > 0 { &inp[(y - 1) * w..y * w] } else { &zeros[..w] };
        let rm = &inp[y * w..(y + 1) * w];
        let rb = if y + 1 < h { &inp[(y + 1) * w..(y + 2) * w] } else { &zeros[..w] };
        let o0 = &mut out[y * w..(y + 1) * w];
        for x in 1..e {
            o0[x] += k[0] * ra[x - 1] + k[1] * ra[x] + k[2] * ra[x + 1] + k[3] * rm[x - 1]
                + k[4] * rm[x] + k[5] * rm[x + 1] + k[6] * rb[x - 1] + k[7] * rb[x]
                + k[8] * rb[x + 1];
        }
        o0[0] += k[1] * ra[0] + k[2] * ra[1] + k[4] * rm[0] + k[5] * rm[1] + k[7] * rb[0]
            + k[8] * rb[1];
        o0[e] += k[0] * ra[e - 1] + k[1] * ra[e] + k[3] * rm[e - 1] + k[4] * rm[e]
            + k[6] * rb[e - 1] + k[7] * rb[e];
    }
}

/// Fallback for widths 1 and 2 where the uniform interior loop cannot run.
fn stencil3_accum_narrow(out: &mut [f64], inp: &[f64], h: usize, w: usize, k: &[f64; 9]) {
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    acc += k[ky * 3 + kx] * inp[iy as usize * w + ix as usize];
                }
            }
            out[y * w + x] += acc;
        }
    }
}

/// conv2d forward. `inp [cin,h,w]`, `wgt [cout,cin,k,k]`, optional `bias
/// [cout]`, zero padding. Writes `out [cout,oh,ow]`.
pub fn conv2d_fwd(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(out.len(), cout * oh * ow);
    if k == 3 && stride == 1 && pad == 1 {
        par::for_each_chunk(out, h * w, |co, oplane| {
            oplane.fill(bias.map_or(0.0, |bs| bs[co]));
            for ci in 0..cin {
                let mut k9 = [0.0; 9];
                k9.copy_from_slice(&wgt[(co * cin + ci) * 9..(co * cin + ci + 1) * 9]);
                stencil3_accum(oplane, &inp[ci * h * w..(ci + 1) * h * w], h, w, &k9);
            }
        });
        return;
    }
    if k == 1 && stride == 1 && pad == 0 {
        par::for_each_chunk(out, h * w, |co, oplane| {
            oplane.fill(bias.map_or(0.0, |bs| bs[co]));
            for ci in 0..cin {
                axpy(oplane, wgt[co * cin + ci], &inp[ci * h * w..(ci + 1) * h * w]);
            }
        });
        return;
    }
    // general path (used by the stride-2 encoder convs)
    par::for_each_chunk(out, oh * ow, |co, oplane| {
        oplane.fill(bias.map_or(0.0, |bs| bs[co]));
        for ci in 0..cin {
            let wbase = ((co * cin) + ci) * k * k;
            let iplane = &inp[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc += wgt[wbase + ky * k + kx] * iplane[iy as usize * w + ix as usize];
                        }
                    }
                    oplane[oy * ow + ox] += acc;
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input. Accumulates into `ginp`.
pub fn conv2d_bwd_input(
    gout: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ginp: &mut [f64],
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(gout.len(), cout * oh * ow);
    debug_assert_eq!(ginp.len(), cin * h * w);
    if k == 3 && stride == 1 && pad == 1 {
        // full correlation with the 180-degree flipped kernel
        par::for_each_chunk(ginp, h * w, |ci, gplane| {
            for co in 0..cout {
                let wk = &wgt[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                let mut flipped = [0.0; 9];
                for t in 0..9 {
                    flipped[t] = wk[8 - t];
                }
                stencil3_accum(gplane, &gout[co * h * w..(co + 1) * h * w], h, w, &flipped);
            }
        });
        return;
    }
    if k == 1 && stride == 1 && pad == 0 {
        par::for_each_chunk(ginp, h * w, |ci, gplane| {
            for co in 0..cout {
                axpy(gplane, wgt[co * cin + ci], &gout[co * h * w..(co + 1) * h * w]);
            }
        });
        return;
    }
    par::for_each_chunk(ginp, h * w, |ci, gplane| {
        for co in 0..cout {
            let wbase = ((co * cin) + ci) * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[(co * oh + oy) * ow + ox];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            gplane[iy as usize * w + ix as usize] += g * wgt[wbase + ky * k + kx];
                        }
                    }
                }
            }
        }
    });
}

/// Gradients w.r.t. weights and bias. Accumulates into `gwgt` / `gbias`.
pub fn conv2d_bwd_weight(
    gout: &[f64],
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gwgt: &mut [f64],
    gbias: Option<&mut [f64]>,
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    if let Some(gb) = gbias {
        for co in 0..cout {
            gb[co] += sum_f64(&gout[co * oh * ow..(co + 1) * oh * ow]);
        }
    }
    if k == 3 && stride == 1 && pad == 1 && w >= 3 {
        // output channels in pairs so each loaded input row feeds six
        // accumulator groups; pairs are independent weight slices
        let paired = cout / 2 * 2;
        par::for_each_chunk(&mut gwgt[..paired * cin * 9], 2 * cin * 9, |p, gw2| {
            conv3_wgrad_pair(gout, inp, cin, h, w, 2 * p, gw2);
        });
        if paired < cout {
            let co = cout - 1;
            let zeros = vec![0.0f64; w];
            conv3_wgrad_single(gout, inp, cin, h, w, co, &zeros, &mut gwgt[co * cin * 9..]);
        }
        return;
    }
    if k == 1 && stride == 1 && pad == 0 {
        par::for_each_chunk(gwgt, cin, |co, gw| {
            let gplane = &gout[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                gw[ci] += dot_f64(gplane, &inp[ci * h * w..(ci + 1) * h * w]);
            }
        });
        return;
    }
    par::for_each_chunk(gwgt, cin * k * k, |co, gw| {
        let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let iplane = &inp[ci * h * w..(ci + 1) * h * w];
            let wbase = ci * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc += gplane[oy * ow + ox] * iplane[iy as usize * w + ix as usize];
                        }
                    }
                    gw[wbase + ky * k + kx] += acc;
                }
            }
        }
    });
}

/// Weight gradient for output channels `co` and `co + 1` of the 3x3 fast
/// path. `gw2` is the `[2 * cin * 9]` weight-gradient slice for the pair.
fn conv3_wgrad_pair(
    gout: &[f64],
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    co: usize,
    gw2: &mut [f64],
) {
    let zeros = vec![0.0f64; w];
    {
        let g0p = &gout[co * h * w..(co + 1) * h * w];
        let g1p = &gout[(co + 1) * h * w..(co + 2) * h * w];
        for ci in 0..cin {
                let iplane = &inp[ci * h * w..(ci + 1) * h * w];
                let mut acc0 = [0.0f64; 9];
                let mut acc1 = [0.0f64; 9];
                for y in 0..h {
                    let g0 = &g0p[y * w..(y + 1) * w];
                    let g1 = &g1p[y * w..(y + 1) * w];
                    for t in 0..3usize {
                        let iy = y as isize + t as isize - 1;
                        let irow = if iy >= 0 && (iy as usize) < h {
                            &iplane[iy as usize * w..(iy as usize + 1) * w]
                        } else {
                            &zeros[..w]
                        };
                        // four independent lanes per tap so the strict-FP
                        // reduction still vectorizes; combine order is fixed
                        let mut v0 = [0.0f64; 4];
                        let mut v1 = [0.0f64; 4];
                        let mut v2 = [0.0f64; 4];
                        let mut u0 = [0.0f64; 4];
                        let mut u1 = [0.0f64; 4];
                        let mut u2 = [0.0f64; 4];
                        let n = w - 2;
                        let lanes = n / 4 * 4;
                        for c in 0..n / 4 {
                            let x = 1 + c * 4;
                            let ga: &[f64; 4] = g0[x..x + 4].try_into().unwrap();
                            let gb: &[f64; 4] = g1[x..x + 4].try_into().unwrap();
                            let iw: &[f64; 6] = irow[x - 1..x + 5].try_into().unwrap();
                            for l in 0..4 {
                                v0[l] += ga[l] * iw[l];
                                v1[l] += ga[l] * iw[l + 1];
                                v2[l] += ga[l] * iw[l + 2];
                                u0[l] += gb[l] * iw[l];
                                u1[l] += gb[l] * iw[l + 1];
                                u2[l] += gb[l] * iw[l + 2];
                            }
                        }
                        let mut p0 = (v0[0] + v0[1]) + (v0[2] + v0[3]);
                        let mut p1 = (v1[0] + v1[1]) + (v1[2] + v1[3]);
                        let mut p2 = (v2[0] + v2[1]) + (v2[2] + v2[3]);
                        let mut q0 = (u0[0] + u0[1]) + (u0[2] + u0[3]);
                        let mut q1 = (u1[0] + u1[1]) + (u1[2] + u1[3]);
                        let mut q2 = (u2[0] + u2[1]) + (u2[2] + u2[3]);
                        for x in 1 + lanes..w - 1 {
                            let ga = g0[x];
                            let gb = g1[x];
                            let il = irow[x - 1];
                            let im = irow[x];
                            let ir = irow[x + 1];
                            p0 += ga * il;
                            p1 += ga * im;
                            p2 += ga * ir;
                            q0 += gb * il;
                            q1 += gb * im;
                            q2 += gb * ir;
                        }
                        {
                            let ga = g0[0];
                            let gb = g1[0];
                            p1 += ga * irow[0];
                            p2 += ga * irow[1];
                            q1 += gb * irow[0];
                            q2 += gb * irow[1];
                            let e = w - 1;
                            let ga = g0[e];
                            let gb = g1[e];
                            p0 += ga * irow[e - 1];
                            p1 += ga * irow[e];
                            q0 += gb * irow[e - 1];
                            q1 += gb * irow[e];
                        }
                        acc0[t * 3] += p0;
                        acc0[t * 3 + 1] += p1;
                        acc0[t * 3 + 2] += p2;
                        acc1[t * 3] += q0;
                        acc1[t * 3 + 1] += q1;
                        acc1[t * 3 + 2] += q2;
                    }
                }
                for t in 0..9 {
                    gw2[ci * 9 + t] += acc0[t];
                    gw2[(cin + ci) * 9 + t] += acc1[t];
                }
            }
    }
}

/// Weight gradient for one trailing output channel of the 3x3 fast path.
fn conv3_wgrad_single(
    gout: &[f64],
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    co: usize,
    zeros: &[f64],
    gw: &mut [f64],
) {
    let gplane = &gout[co * h * w..(co + 1) * h * w];
    for ci in 0..cin {
        let iplane = &inp[ci * h * w..(ci + 1) * h * w];
        let mut acc = [0.0f64; 9];
        for y in 0..h {
            let grow = &gplane[y * w..(y + 1) * w];
            for t in 0..3usize {
                let iy = y as isize + t as isize - 1;
                let irow = if iy >= 0 && (iy as usize) < h {
                    &iplane[iy as usize * w..(iy as usize + 1) * w]
                } else {
                    &zeros[..w]
                };
                let mut p0 = 0.0;
                let mut p1 = 0.0;
                let mut p2 = 0.0;
                for x in 1..w - 1 {
                    let g = grow[x];
                    p0 += g * irow[x - 1];
                    p1 += g * irow[x];
                    p2 += g * irow[x + 1];
                }
                let g = grow[0];
                p1 += g * irow[0];
                p2 += g * irow[1];
                let e = w - 1;
                let g = grow[e];
                p0 += g * irow[e - 1];
                p1 += g * irow[e];
                acc[t * 3] += p0;
                acc[t * 3 + 1] += p1;
                acc[t * 3 + 2] += p2;
            }
        }
        for t in 0..9 {
            gw[ci * 9 + t] += acc[t];
        }
    }
}

// ---------------------------------------------------- bilinear sampling --

/// Padding behavior for positions outside the source domain.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplePad {
    /// Out-of-domain taps read this value on every channel.
    Uniform(f64),
    /// Out-of-domain taps read a per-channel value.
    PerChannel(Vec<f64>),
    /// Positions are clamped to the border before sampling.
    Border,
}

impl SamplePad {
    fn value(&self, c: usize) -> f64 {
        match self {
            SamplePad::Uniform(v) => *v,
            SamplePad::PerChannel(vs) => vs[c],
            SamplePad::Border => 0.0,
        }
    }
}

#[inline]
fn clamp_coord(v: f64, n: usize) -> f64 {
    v.max(0.0).min((n - 1) as f64)
}

/// Bilinear sampling of `inp [c,h,w]` at `n` positions (`pos [n,2]`, (x,y)).
/// Writes `out [c,n]`. Exact pass-through at integer positions.
pub fn bilinear_sample_fwd(
    inp: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pos: &[f64],
    n: usize,
    pad: &SamplePad,
    out: &mut [f64],
) {
    debug_assert_eq!(pos.len(), 2 * n);
    debug_assert_eq!(out.len(), c * n);
    let border = matches!(pad, SamplePad::Border);
    for i in 0..n {
        let (mut x, mut y) = (pos[2 * i], pos[2 * i + 1]);
        if border {
            x = clamp_coord(x, w);
            y = clamp_coord(y, h);
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let wx = x - x0;
        let wy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let w00 = (1.0 - wy) * (1.0 - wx);
        let w01 = (1.0 - wy) * wx;
        let w10 = wy * (1.0 - wx);
        let w11 = wy * wx;
        let inside =
            |xx: isize, yy: isize| xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h;
        let i00 = inside(x0, y0);
        let i01 = inside(x0 + 1, y0);
        let i10 = inside(x0, y0 + 1);
        let i11 = inside(x0 + 1, y0 + 1);
        for ch in 0..c {
            let plane = &inp[ch * h * w..(ch + 1) * h * w];
            let pv = pad.value(ch);
            let at = |ok: bool, xx: isize, yy: isize| {
                if ok {
                    plane[yy as usize * w + xx as usize]
                } else {
                    pv
                }
            };
            let v = w00 * at(i00, x0, y0)
                + w01 * at(i01, x0 + 1, y0)
                + w10 * at(i10, x0, y0 + 1)
                + w11 * at(i11, x0 + 1, y0 + 1);
            out[ch * n + i] = v;
        }
    }
}

/// Backward of [`bilinear_sample_fwd`]. Accumulates into `ginp [c,h,w]` and
/// `gpos [n,2]`.
pub fn bilinear_sample_bwd(
    inp: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pos: &[f64],
    n: usize,
    pad: &SamplePad,
    gout: &[f64],
    ginp: Option<&mut [f64]>,
    gpos: Option<&mut [f64]>,
) {
    let border = matches!(pad, SamplePad::Border);
    let mut ginp = ginp;
    let mut gpos = gpos;
    for i in 0..n {
        let (rx, ry) = (pos[2 * i], pos[2 * i + 1]);
        let mut x = rx;
        let mut y = ry;
        if border {
            x = clamp_coord(x, w);
            y = clamp_coord(y, h);
        }
        // clamped coordinates have zero derivative outside the domain
        let dxdr = if border && (rx < 0.0 || rx > (w - 1) as f64) { 0.0 } else { 1.0 };
        let dydr = if border && (ry < 0.0 || ry > (h - 1) as f64) { 0.0 } else { 1.0 };
        let x0f = x.floor();
        let y0f = y.floor();
        let wx = x - x0f;
        let wy = y - y0f;
        let (x0, y0) = (x0f as isize, y0f as isize);
        let inside =
            |xx: isize, yy: isize| xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h;
        let i00 = inside(x0, y0);
        let i01 = inside(x0 + 1, y0);
        let i10 = inside(x0, y0 + 1);
        let i11 = inside(x0 + 1, y0 + 1);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..c {
            let g = gout[ch * n + i];
            if g == 0.0 {
                continue;
            }
            let plane = &inp[ch * h * w..(ch + 1) * h * w];
            let pv = pad.value(ch);
            let at = |ok: bool, xx: isize, yy: isize| {
                if ok {
                    plane[yy as usize * w + xx as usize]
                } else {
                    pv
                }
            };
            let v00 = at(i00, x0, y0);
            let v01 = at(i01, x0 + 1, y0);
            let v10 = at(i10, x0, y0 + 1);
            let v11 = at(i11, x0 + 1, y0 + 1);
            if let Some(gi) = ginp.as_deref_mut() {
                let gplane = &mut gi[ch * h * w..(ch + 1) * h * w];
                let mut add = |ok: bool, xx: isize, yy: isize, wgt: f64| {
                    if ok && wgt != 0.0 {
                        gplane[yy as usize * w + xx as usize] += g * wgt;
                    }
                };
                add(i00, x0, y0, (1.0 - wy) * (1.0 - wx));
                add(i01, x0 + 1, y0, (1.0 - wy) * wx);
                add(i10, x0, y0 + 1, wy * (1.0 - wx));
                add(i11, x0 + 1, y0 + 1, wy * wx);
            }
            gx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
            gy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
        }
        if let Some(gp) = gpos.as_deref_mut() {
            gp[2 * i] += gx * dxdr;
            gp[2 * i + 1] += gy * dydr;
        }
    }
}

/// Bilinear sampling of an interleaved two-component field `field [h,w,2]`
/// at `pos [n,2]`, border-clamped. Writes `out [n,2]`.
pub fn sample_field_fwd(field: &[f64], h: usize, w: usize, pos: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(field.len(), h * w * 2);
    debug_assert_eq!(out.len(), 2 * n);
    for i in 0..n {
        let x = clamp_coord(pos[2 * i], w);
        let y = clamp_coord(pos[2 * i + 1], h);
        let x0f = x.floor().min((w - 1) as f64);
        let y0f = y.floor().min((h - 1) as f64);
        let wx = x - x0f;
        let wy = y - y0f;
        let x0 = x0f as usize;
        let y0 = y0f as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let w00 = (1.0 - wy) * (1.0 - wx);
        let w01 = (1.0 - wy) * wx;
        let w10 = wy * (1.0 - wx);
        let w11 = wy * wx;
        for comp in 0..2 {
            let v = w00 * field[(y0 * w + x0) * 2 + comp]
                + w01 * field[(y0 * w + x1) * 2 + comp]
                + w10 * field[(y1 * w + x0) * 2 + comp]
                + w11 * field[(y1 * w + x1) * 2 + comp];
            out[2 * i + comp] = v;
        }
    }
}

/// Backward of [`sample_field_fwd`]. Accumulates into `gfield` and `gpos`.
pub fn sample_field_bwd(
    field: &[f64],
    h: usize,
    w: usize,
    pos: &[f64],
    n: usize,
    gout: &[f64],
    gfield: Option<&mut [f64]>,
    gpos: Option<&mut [f64]>,
) {
    let mut gfield = gfield;
    let mut gpos = gpos;
    for i in 0..n {
        let (rx, ry) = (pos[2 * i], pos[2 * i + 1]);
        let x = clamp_coord(rx, w);
        let y = clamp_coord(ry, h);
        let dxdr = if rx < 0.0 || rx > (w - 1) as f64 { 0.0 } else { 1.0 };
        let dydr = if ry < 0.0 || ry > (h - 1) as f64 { 0.0 } else { 1.0 };
        let x0f = x.floor().min((w - 1) as f64);
        let y0f = y.floor().min((h - 1) as f64);
        let wx = x - x0f;
        let wy = y - y0f;
        let x0 = x0f as usize;
        let y0 = y0f as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for comp in 0..2 {
            let g = gout[2 * i + comp];
            if g == 0.0 {
                continue;
            }
            let v00 = field[(y0 * w + x0) * 2 + comp];
            let v01 = field[(y0 * w + x1) * 2 + comp];
            let v10 = field[(y1 * w + x0) * 2 + comp];
            let v11 = field[(y1 * w + x1) * 2 + comp];
            if let Some(gf) = gfield.as_deref_mut() {
                gf[(y0 * w + x0) * 2 + comp] += g * (1.0 - wy) * (1.0 - wx);
                gf[(y0 * w + x1) * 2 + comp] += g * (1.0 - wy) * wx;
                gf[(y1 * w + x0) * 2 + comp] += g * wy * (1.0 - wx);
                gf[(y1 * w + x1) * 2 + comp] += g * wy * wx;
            }
            gx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
            gy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
        }
        if let Some(gp) = gpos.as_deref_mut() {
            gp[2 * i] += gx * dxdr;
            gp[2 * i + 1] += gy * dydr;
        }
    }
}

// ---------------------------------------------------------- gaussian blur --

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "gaussian blur requires sigma > 0, got {sigma}");
    let r = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s = sum_f64(&k);
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable reflect-padded blur of `inp [c,h,w]` with 1-D taps `k`.
pub fn blur2d_fwd(inp: &[f64], c: usize, h: usize, w: usize, k: &[f64], out: &mut [f64]) {
    let r = k.len() / 2;
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &inp[ch * h * w..(ch + 1) * h * w];
        // horizontal
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let trow = &mut tmp[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * row[reflect(x as isize + t as isize - r as isize, w)];
                }
                trow[x] = acc;
            }
        }
        // vertical
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let orow = &mut oplane[y * w..(y + 1) * w];
            orow.fill(0.0);
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - r as isize, h);
                axpy(orow, kv, &tmp[sy * w..(sy + 1) * w]);
            }
        }
    }
}

/// Adjoint of [`blur2d_fwd`] (scatter through the same reflect indexing).
/// Accumulates into `ginp`.
pub fn blur2d_adjoint(gout: &[f64], c: usize, h: usize, w: usize, k: &[f64], ginp: &mut [f64]) {
    let r = k.len() / 2;
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let gplane = &gout[ch * h * w..(ch + 1) * h * w];
        // adjoint of the vertical pass
        tmp.fill(0.0);
        for y in 0..h {
            let grow = &gplane[y * w..(y + 1) * w];
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + t as isize - r as isize, h);
                axpy(&mut tmp[sy * w..(sy + 1) * w], kv, grow);
            }
        }
        // adjoint of the horizontal pass
        let giplane = &mut ginp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let trow = &tmp[y * w..(y + 1) * w];
            let girow = &mut giplane[y * w..(y + 1) * w];
            for x in 0..w {
                let g = trow[x];
                if g == 0.0 {
                    continue;
                }
                for (t, &kv) in k.iter().enumerate() {
                    girow[reflect(x as isize + t as isize - r as isize, w)] += kv * g;
                }
            }
        }
    }
}

// -------------------------------------------------------------- upsample --

/// Nearest-neighbor x2 upsampling of `[c,h,w]` into `[c,2h,2w]`.
pub fn upsample2x_nearest_fwd(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let plane = &inp[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let irow = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                orow[ox] = irow[ox / 2];
            }
        }
    }
}

pub fn upsample2x_nearest_bwd(gout: &[f64], c: usize, h: usize, w: usize, ginp: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let gplane = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        let giplane = &mut ginp[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            let girow = &mut giplane[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                girow[ox / 2] += grow[ox];
            }
        }
    }
}

// x2 bilinear upsampling with half-pixel centers: output sample 2i sits a
// quarter pixel left of input sample i, 2i+1 a quarter pixel right.
#[inline]
fn up2_weights(o: usize, n: usize) -> (usize, usize, f64) {
    // returns (left index, right index, right weight) along one axis
    if o % 2 == 0 {
        let i = o / 2;
        if i == 0 {
            (0, 0, 0.0)
        } else {
            (i - 1, i, 0.75)
        }
    } else {
        let i = o / 2;
        if i + 1 >= n {
            (i, i, 0.0)
        } else {
            (i, i + 1, 0.25)
        }
    }
}

/// Bilinear x2 upsampling of `[c,h,w]` into `[c,2h,2w]`.
pub fn upsample2x_bilinear_fwd(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    // horizontal first into tmp [c? row at a time]
    let mut tmp = vec![0.0f64; h * ow];
    for ch in 0..c {
        let plane = &inp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let trow = &mut tmp[y * ow..(y + 1) * ow];
            for ox in 0..ow {
                let (l, r, wr) = up2_weights(ox, w);
                trow[ox] = (1.0 - wr) * row[l] + wr * row[r];
            }
        }
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (t, b, wb) = up2_weights(oy, h);
            let rt = &tmp[t * ow..(t + 1) * ow];
            let rb = &tmp[b * ow..(b + 1) * ow];
            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                orow[ox] = (1.0 - wb) * rt[ox] + wb * rb[ox];
            }
        }
    }
}

pub fn upsample2x_bilinear_bwd(gout: &[f64], c: usize, h: usize, w: usize, ginp: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    let mut tmp = vec![0.0f64; h * ow];
    for ch in 0..c {
        let gplane = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        tmp.fill(0.0);
        for oy in 0..oh {
            let (t, b, wb) = up2_weights(oy, h);
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            axpy(&mut tmp[t * ow..(t + 1) * ow], 1.0 - wb, grow);
            axpy(&mut tmp[b * ow..(b + 1) * ow], wb, grow);
        }
        let giplane = &mut ginp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let trow = &tmp[y * ow..(y + 1) * ow];
            let girow = &mut giplane[y * w..(y + 1) * w];
            for ox in 0..ow {
                let (l, r, wr) = up2_weights(ox, w);
                girow[l] += (1.0 - wr) * trow[ox];
                girow[r] += wr * trow[ox];
            }
        }
    }
}

// --------------------------------------------------------- instance norm --

/// Per-channel standardization over the spatial extent. Returns
/// `(mean, inv_std)` per channel for the backward pass.
pub fn instance_norm_fwd(
    inp: &[f64],
    c: usize,
    n: usize,
    eps: f64,
    out: &mut [f64],
) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &inp[ch * n..(ch + 1) * n];
        let mean = sum_f64(plane) / n as f64;
        let mut var4 = [0.0f64; 4];
        let mut chunks = plane.chunks_exact(4);
        for q in &mut chunks {
            for j in 0..4 {
                let d = q[j] - mean;
                var4[j] += d * d;
            }
        }
        let mut tail = 0.0;
        for &v in chunks.remainder() {
            let d = v - mean;
            tail += d * d;
        }
        let var = ((var4[0] + var4[1]) + (var4[2] + var4[3]) + tail) / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let oplane = &mut out[ch * n..(ch + 1) * n];
        for (o, &v) in oplane.iter_mut().zip(plane) {
            *o = (v - mean) * inv_std;
        }
        stats.push((mean, inv_std));
    }
    stats
}

/// Backward of [`instance_norm_fwd`]; `xhat` is the forward output.
pub fn instance_norm_bwd(
    xhat: &[f64],
    c: usize,
    n: usize,
    stats: &[(f64, f64)],
    gout: &[f64],
    ginp: &mut [f64],
) {
    let nf = n as f64;
    for ch in 0..c {
        let xh = &xhat[ch * n..(ch + 1) * n];
        let g = &gout[ch * n..(ch + 1) * n];
        let (_, inv_std) = stats[ch];
        let gmean = sum_f64(g) / nf;
        let gdot = dot_f64(g, xh) / nf;
        let gi = &mut ginp[ch * n..(ch + 1) * n];
        for i in 0..n {
            gi[i] += inv_std * (g[i] - gmean - xh[i] * gdot);
        }
    }
}

// -------------------------------------------------- jacobian determinant --

/// Forward-difference Jacobian determinant of `field [h,w,2]` on the
/// `(h-1) x (w-1)` cell grid.
pub fn jacdet_fwd(field: &[f64], h: usize, w: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), (h - 1) * (w - 1));
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = (y * w + x) * 2;
            let px = (y * w + x + 1) * 2;
            let py = ((y + 1) * w + x) * 2;
            let a = field[px] - field[p]; // d phi_x / dx
            let b = field[py] - field[p]; // d phi_x / dy
            let cc = field[px + 1] - field[p + 1]; // d phi_y / dx
            let d = field[py + 1] - field[p + 1]; // d phi_y / dy
            out[y * (w - 1) + x] = a * d - b * cc;
        }
    }
}

/// Backward of [`jacdet_fwd`]. Accumulates into `gfield [h,w,2]`.
pub fn jacdet_bwd(field: &[f64], h: usize, w: usize, gout: &[f64], gfield: &mut [f64]) {
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let g = gout[y * (w - 1) + x];
            if g == 0.0 {
                continue;
            }
            let p = (y * w + x) * 2;
            let px = (y * w + x + 1) * 2;
            let py = ((y + 1) * w + x) * 2;
            let a = field[px] - field[p];
            let b = field[py] - field[p];
            let cc = field[px + 1] - field[p + 1];
            let d = field[py + 1] - field[p + 1];
            // D = a d - b c
            let (ga, gb, gc, gd) = (g * d, -g * cc, -g * b, g * a);
            gfield[px] += ga;
            gfield[p] -= ga;
            gfield[py] += gb;
            gfield[p] -= gb;
            gfield[px + 1] += gc;
            gfield[p + 1] -= gc;
            gfield[py + 1] += gd;
            gfield[p + 1] -= gd;
        }
    }
}

// ------------------------------------------------- displacement gradient --

/// Mean over the `(h-1) x (w-1)` cell grid of the summed squared forward
/// differences of both components of `u [h,w,2]`.
pub fn gradsq_mean_fwd(u: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    for y in 0..h - 1 {
        let mut racc = [0.0f64; 4];
        for x in 0..w - 1 {
            let p = (y * w + x) * 2;
            let px = (y * w + x + 1) * 2;
            let py = ((y + 1) * w + x) * 2;
            let dxx = u[px] - u[p];
            let dxy = u[py] - u[p];
            let dyx = u[px + 1] - u[p + 1];
            let dyy = u[py + 1] - u[p + 1];
            racc[x % 4] += dxx * dxx + dxy * dxy + dyx * dyx + dyy * dyy;
        }
        acc += (racc[0] + racc[1]) + (racc[2] + racc[3]);
    }
    acc / ((h - 1) * (w - 1)) as f64
}

/// Backward of [`gradsq_mean_fwd`]. Accumulates `gscalar * d/du` into `gu`.
pub fn gradsq_mean_bwd(u: &[f64], h: usize, w: usize, gscalar: f64, gu: &mut [f64]) {
    let scale = 2.0 * gscalar / ((h - 1) * (w - 1)) as f64;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = (y * w + x) * 2;
            let px = (y * w + x + 1) * 2;
            let py = ((y + 1) * w + x) * 2;
            for comp in 0..2 {
                let dx = u[px + comp] - u[p + comp];
                let dy = u[py + comp] - u[p + comp];
                gu[px + comp] += scale * dx;
                gu[py + comp] += scale * dy;
                gu[p + comp] -= scale * (dx + dy);
            }
        }
    }
}

// ------------------------------------------- constant-channel conv terms --

/// Response of a zero-padded 3x3 convolution to channels that are spatially
/// constant. The response only depends on which taps fall inside the image,
/// which splits the output into 9 border regions; `table [cout,3,3]` holds
/// the value per region (row region, col region; index 1 = interior).
pub fn const_response_table(
    wgt: &[f64],
    cout: usize,
    cin_total: usize,
    const_offset: usize,
    cvals: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut table = vec![0.0f64; cout * 9];
    for co in 0..cout {
        for ry in 0..3usize {
            for rx in 0..3usize {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for (j, &cv) in cvals.iter().enumerate() {
                    let ci = const_offset + j;
                    let wk = &wgt[(co * cin_total + ci) * 9..(co * cin_total + ci + 1) * 9];
                    let mut s = 0.0;
                    for ky in 0..3usize {
                        if (ry == 0 && ky == 0) || (ry == 2 && ky == 2) {
                            continue;
                        }
                        for kx in 0..3usize {
                            if (rx == 0 && kx == 0) || (rx == 2 && kx == 2) {
                                continue;
                            }
                            s += wk[ky * 3 + kx];
                        }
                    }
                    acc += cv * s;
                }
                table[co * 9 + ry * 3 + rx] = acc;
            }
        }
    }
    table
}

/// Region index along one axis for a length-`n` axis.
#[inline]
fn region(i: usize, n: usize) -> usize {
    if i == 0 {
        0
    } else if i + 1 == n {
        2
    } else {
        1
    }
}

/// Adds the per-region table values onto `out [cout,h,w]`.
pub fn const_response_add(table: &[f64], cout: usize, h: usize, w: usize, out: &mut [f64]) {
    for co in 0..cout {
        let t = &table[co * 9..(co + 1) * 9];
        let oplane = &mut out[co * h * w..(co + 1) * h * w];
        for y in 0..h {
            let ty = region(y, h) * 3;
            let row = &mut oplane[y * w..(y + 1) * w];
            row[0] += t[ty];
            for v in &mut row[1..w - 1] {
                *v += t[ty + 1];
            }
            if w > 1 {
                row[w - 1] += t[ty + 2];
            }
        }
    }
}

/// Nine tap-region sums of a gradient plane: `sums[ky][kx]` is the sum of
/// `g` over positions where tap `(ky,kx)` of a zero-padded 3x3 kernel stays
/// in range.
pub fn tap_region_sums(g: &[f64], h: usize, w: usize) -> [f64; 9] {
    let full = sum_f64(g);
    let row0 = sum_f64(&g[0..w]);
    let rowl = sum_f64(&g[(h - 1) * w..h * w]);
    let mut col0 = 0.0;
    let mut coll = 0.0;
    for y in 0..h {
        col0 += g[y * w];
        coll += g[y * w + w - 1];
    }
    let c00 = g[0];
    let c0l = g[w - 1];
    let cl0 = g[(h - 1) * w];
    let cll = g[h * w - 1];
    let mut sums = [0.0f64; 9];
    for ky in 0..3usize {
        // tap row ky is valid unless it would read above row 0 (ky=0 at y=0)
        // or below the last row (ky=2 at y=h-1)
        let (sub_top, sub_bot) = (ky == 0, ky == 2);
        for kx in 0..3usize {
            let (sub_left, sub_right) = (kx == 0, kx == 2);
            let mut s = full;
            if sub_top {
                s -= row0;
            }
            if sub_bot {
                s -= rowl;
            }
            if sub_left {
                s -= col0;
            }
            if sub_right {
                s -= coll;
            }
            // re-add doubly subtracted corners
            if sub_top && sub_left {
                s += c00;
            }
            if sub_top && sub_right {
                s += c0l;
            }
            if sub_bot && sub_left {
                s += cl0;
            }
            if sub_bot && sub_right {
                s += cll;
            }
            sums[ky * 3 + kx] = s;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let inp: Vec<f64> = (0..25).map(|v| v as f64 * 0.3 - 2.0).collect();
        let mut wgt = vec![0.0; 9];
        wgt[4] = 1.0;
        let mut out = vec![0.0; 25];
        conv2d_fwd(&inp, 1, 5, 5, &wgt, None, 1, 3, 1, 1, &mut out);
        assert_eq!(inp, out);
    }

    #[test]
    fn conv_all_ones_counts_in_range_taps() {
        let inp = vec![1.0; 16];
        let wgt = vec![1.0; 9];
        let mut out = vec![0.0; 16];
        conv2d_fwd(&inp, 1, 4, 4, &wgt, None, 1, 3, 1, 1, &mut out);
        // corners see 4 taps, edges 6, interior 9
        let expect = [
            4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(out, expect);
    }

    #[test]
    fn strided_conv_matches_direct_computation() {
        // 4x4 ramp, 3x3 kernel of ones, stride 2, pad 1
        let inp: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let wgt = vec![1.0; 9];
        let mut out = vec![0.0; 4];
        conv2d_fwd(&inp, 1, 4, 4, &wgt, None, 1, 3, 2, 1, &mut out);
        // out(0,0) covers rows -1..1, cols -1..1 -> 0+1+4+5 = 10
        // out(0,1) covers rows -1..1, cols 1..3  -> 1+2+3+5+6+7 = 24
        // out(1,0) covers rows 1..3, cols -1..1  -> 4+5+8+9+12+13 = 51
        // out(1,1) covers rows 1..3, cols 1..3   -> 5+..+15 minus col 0 = 90
        assert_eq!(out, [10.0, 24.0, 51.0, 90.0]);
    }

    #[test]
    fn conv_results_do_not_depend_on_thread_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // odd cout exercises the unpaired tail of the weight-gradient path
        let (cin, cout, h, w) = (5usize, 7usize, 19usize, 23usize);
        let inp: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gout: Vec<f64> = (0..cout * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (k, stride, pad) in [(3usize, 1usize, 1usize), (1, 1, 0), (3, 2, 1)] {
            let wgt: Vec<f64> =
                (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let oh = conv_out_len(h, k, stride, pad);
            let ow = conv_out_len(w, k, stride, pad);
            let mut runs = Vec::new();
            for nt in [1usize, 2, 5] {
                par::set_thread_count(nt);
                let mut out = vec![0.0; cout * oh * ow];
                conv2d_fwd(&inp, cin, h, w, &wgt, Some(&bias), cout, k, stride, pad, &mut out);
                let mut ginp = vec![0.0; cin * h * w];
                conv2d_bwd_input(&gout[..cout * oh * ow], cin, h, w, &wgt, cout, k, stride, pad, &mut ginp);
                let mut gwgt = vec![0.0; cout * cin * k * k];
                let mut gbias = vec![0.0; cout];
                conv2d_bwd_weight(
                    &gout[..cout * oh * ow],
                    &inp,
                    cin,
                    h,
                    w,
                    cout,
                    k,
                    stride,
                    pad,
                    &mut gwgt,
                    Some(&mut gbias),
                );
                runs.push((out, ginp, gwgt, gbias));
            }
            par::set_thread_count(1);
            assert_eq!(runs[0], runs[1], "k={k} stride={stride}");
            assert_eq!(runs[0], runs[2], "k={k} stride={stride}");
        }
    }

    #[test]
    fn bilinear_sample_identity_is_exact() {
        let inp: Vec<f64> = (0..30).map(|v| (v as f64).sin()).collect();
        let mut pos = Vec::new();
        for y in 0..5 {
            for x in 0..6 {
                pos.push(x as f64);
                pos.push(y as f64);
            }
        }
        let mut out = vec![0.0; 30];
        bilinear_sample_fwd(&inp, 1, 5, 6, &pos, 30, &SamplePad::Uniform(0.0), &mut out);
        assert_eq!(inp, out);
    }

    #[test]
    fn bilinear_sample_halfway_averages_neighbors() {
        let inp = vec![0.0, 1.0, 2.0, 3.0]; // 2x2
        let pos = vec![0.5, 0.0, 0.0, 0.5, 0.5, 0.5];
        let mut out = vec![0.0; 3];
        bilinear_sample_fwd(&inp, 1, 2, 2, &pos, 3, &SamplePad::Uniform(0.0), &mut out);
        assert_eq!(out, [0.5, 1.0, 1.5]);
    }

    #[test]
    fn blur_keeps_constants_and_normalizes_impulse() {
        let k = gaussian_taps(1.0);
        assert_eq!(k.len(), 7);
        assert!((sum_f64(&k) - 1.0).abs() < 1e-12);
        let inp = vec![3.25; 8 * 8];
        let mut out = vec![0.0; 64];
        blur2d_fwd(&inp, 1, 8, 8, &k, &mut out);
        assert!(max_abs_diff(&inp, &out) < 1e-12);
        // impulse response sums to one (reflect padding keeps mass)
        let mut imp = vec![0.0; 11 * 11];
        imp[5 * 11 + 5] = 1.0;
        let mut blurred = vec![0.0; 11 * 11];
        blur2d_fwd(&imp, 1, 11, 11, &k, &mut blurred);
        assert!((sum_f64(&blurred) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_bilinear_doubles_a_ramp_with_midpoints() {
        // 2x2 ramp: [[0,1],[2,3]]
        let inp = vec![0.0, 1.0, 2.0, 3.0];
        let mut out = vec![0.0; 16];
        upsample2x_bilinear_fwd(&inp, 1, 2, 2, &mut out);
        let expect = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        assert!(max_abs_diff(&out, &expect) < 1e-12);
    }

    #[test]
    fn jacdet_of_identity_grid_is_one() {
        let (h, w) = (4, 5);
        let mut field = vec![0.0; h * w * 2];
        for y in 0..h {
            for x in 0..w {
                field[(y * w + x) * 2] = x as f64;
                field[(y * w + x) * 2 + 1] = y as f64;
            }
        }
        let mut out = vec![0.0; (h - 1) * (w - 1)];
        jacdet_fwd(&field, h, w, &mut out);
        assert!(out.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn const_response_matches_materialized_conv() {
        use rand::prelude::*;
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (cout, cspatial, cconst, h, w) = (4, 2, 5, 7, 6);
        let cin = cspatial + cconst;
        let wgt: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen::<f64>() - 0.5).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen::<f64>() - 0.5).collect();
        let cvals: Vec<f64> = (0..cconst).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let spatial: Vec<f64> = (0..cspatial * h * w).map(|_| rng.gen::<f64>()).collect();
        // reference: materialize the constant channels and run a plain conv
        let mut full = vec![0.0; cin * h * w];
        full[..cspatial * h * w].copy_from_slice(&spatial);
        for j in 0..cconst {
            full[(cspatial + j) * h * w..(cspatial + j + 1) * h * w].fill(cvals[j]);
        }
        let mut want = vec![0.0; cout * h * w];
        conv2d_fwd(&full, cin, h, w, &wgt, Some(&bias), cout, 3, 1, 1, &mut want);
        // split route: conv over spatial channels + region table
        let mut got = vec![0.0; cout * h * w];
        // weights for the spatial part only: gather [cout, cspatial, 3, 3]
        let mut wsp = vec![0.0; cout * cspatial * 9];
        for co in 0..cout {
            for ci in 0..cspatial {
                wsp[(co * cspatial + ci) * 9..(co * cspatial + ci + 1) * 9]
                    .copy_from_slice(&wgt[(co * cin + ci) * 9..(co * cin + ci + 1) * 9]);
            }
        }
        conv2d_fwd(&spatial, cspatial, h, w, &wsp, None, cout, 3, 1, 1, &mut got);
        let table = const_response_table(&wgt, cout, cin, cspatial, &cvals, Some(&bias));
        const_response_add(&table, cout, h, w, &mut got);
        assert!(max_abs_diff(&want, &got) < 1e-12);
    }

    #[test]
    fn tap_region_sums_match_direct_loops() {
        use rand::prelude::*;
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (6, 9);
        let g: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.3).collect();
        let sums = tap_region_sums(&g, h, w);
        for ky in 0..3usize {
            for kx in 0..3usize {
                let mut want = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let iy = y as isize + ky as isize - 1;
                        let ix = x as isize + kx as isize - 1;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            want += g[y * w + x];
                        }
                    }
                }
                assert!((sums[ky * 3 + kx] - want).abs() < 1e-9);
            }
        }
    }
}

// Throughput probe for the dominant conv shape; run explicitly with
// `cargo test -p echoflow --lib conv_throughput -- --ignored --nocapture`.
#[cfg(test)]
mod bench {
    use super::*;

    #[test]
    #[ignore]
    fn conv_throughput() {
        let (c, h, w) = (32usize, 64usize, 64usize);
        let inp: Vec<f64> = (0..c * h * w).map(|v| (v as f64 * 0.37).sin()).collect();
        let wgt: Vec<f64> = (0..c * c * 9).map(|v| (v as f64 * 0.11).cos() * 0.1).collect();
        let bias = vec![0.01; c];
        let mut out = vec![0.0; c * h * w];
        let macs = (c * c * 9 * h * w) as f64;
        let reps = 40;

        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv2d_fwd(&inp, c, h, w, &wgt, Some(&bias), c, 3, 1, 1, &mut out);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("conv2d_fwd        {:6.2} GFLOP/s", 2.0 * macs * reps as f64 / dt / 1e9);

        let mut ginp = vec![0.0; c * h * w];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv2d_bwd_input(&out, c, h, w, &wgt, c, 3, 1, 1, &mut ginp);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("conv2d_bwd_input  {:6.2} GFLOP/s", 2.0 * macs * reps as f64 / dt / 1e9);

        let mut gwgt = vec![0.0; c * c * 9];
        let mut gbias = vec![0.0; c];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv2d_bwd_weight(&out, &inp, c, h, w, c, 3, 1, 1, &mut gwgt, Some(&mut gbias));
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("conv2d_bwd_weight {:6.2} GFLOP/s", 2.0 * macs * reps as f64 / dt / 1e9);
    }
}
