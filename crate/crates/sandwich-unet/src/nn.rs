//! Neural-network primitives over `[C, H, W]` tensors: 2-D convolution,
//! max pooling, transposed convolution, channel concatenation, and the
//! ReLU / AReLU activation pair.
//!
//! AReLU is the learnable activation used on the decoder path. With a
//! clamped negative slope `C(alpha)` in `[0.01, 0.99]` and a positive
//! gain `1 + sigmoid(beta)` in `(1, 2)`, it computes
//!
//! ```text
//! F(x) = C(alpha) * x          for x <= 0
//! F(x) = (1 + sigmoid(beta)) * x   for x >= 0
//! ```
//!
//! `alpha` and `beta` are scalar trainable tensors, one pair per
//! activation layer, shared across all elements and channels.
//!
//! Kernels parallelize over output channels/rows; every parallel task
//! writes a disjoint slice with a fixed sequential inner loop, so
//! results are bitwise deterministic regardless of thread scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{push_node, should_track, sigmoid_scalar, Tensor};

/// Clamp bounds for the AReLU negative slope.
pub const ALPHA_CLAMP_LO: f64 = 0.01;
pub const ALPHA_CLAMP_HI: f64 = 0.99;

// ── Activations ──────────────────────────────────────────────────────

/// Rectified linear unit: `max(0, x)`. Gradient passes where `x > 0`.
pub fn relu(x: &Tensor) -> Tensor {
    let out_data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let track = should_track(&[x]);
    let out = Tensor::op_output(x.shape().to_vec(), out_data, track);
    if track {
        let px = x.clone();
        push_node(
            &out,
            Box::new(move |g| {
                if px.requires_grad() {
                    let xd = px.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                        .collect();
                    drop(xd);
                    px.accumulate_grad(&ga);
                }
            }),
        );
    }
    out
}

/// One (alpha, beta) scalar pair backing an AReLU activation layer.
#[derive(Clone, Debug)]
pub struct AReluParams {
    /// Pre-clamp negative-slope parameter.
    pub alpha: Tensor,
    /// Pre-sigmoid positive-gain parameter.
    pub beta: Tensor,
}

impl AReluParams {
    pub fn new(alpha_init: f64, beta_init: f64) -> AReluParams {
        AReluParams {
            alpha: Tensor::param_scalar(alpha_init),
            beta: Tensor::param_scalar(beta_init),
        }
    }

    /// Effective negative slope `C(alpha)`, always in `[0.01, 0.99]`.
    pub fn effective_slope(&self) -> f64 {
        self.alpha.value().clamp(ALPHA_CLAMP_LO, ALPHA_CLAMP_HI)
    }

    /// Effective positive gain `1 + sigmoid(beta)`, always in `(1, 2)`.
    pub fn positive_gain(&self) -> f64 {
        1.0 + sigmoid_scalar(self.beta.value())
    }
}

/// Learnable activation `F(x)`; see the module docs for the form.
///
/// Produces gradients for `x`, `alpha`, and `beta`:
/// `dF/dx` is `C(alpha)` on the negative branch (including `x = 0`) and
/// `1 + sigmoid(beta)` on the positive branch; `dF/dalpha` passes only
/// while `alpha` sits strictly inside the clamp range.
pub fn arelu(x: &Tensor, p: &AReluParams) -> Tensor {
    let alpha_raw = p.alpha.value();
    let slope = alpha_raw.clamp(ALPHA_CLAMP_LO, ALPHA_CLAMP_HI);
    let sb = sigmoid_scalar(p.beta.value());
    let gain = 1.0 + sb;

    let out_data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| if v <= 0.0 { slope * v } else { gain * v })
        .collect();
    let track = should_track(&[x, &p.alpha, &p.beta]);
    let out = Tensor::op_output(x.shape().to_vec(), out_data, track);
    if track {
        let px = x.clone();
        let pa = p.alpha.clone();
        let pb = p.beta.clone();
        push_node(
            &out,
            Box::new(move |g| {
                let xd = px.data();
                if px.requires_grad() {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gi, &v)| if v <= 0.0 { gi * slope } else { gi * gain })
                        .collect();
                    px.accumulate_grad(&gx);
                }
                if pa.requires_grad() {
                    let inside = alpha_raw > ALPHA_CLAMP_LO && alpha_raw < ALPHA_CLAMP_HI;
                    let da = if inside {
                        g.iter()
                            .zip(xd.iter())
                            .map(|(&gi, &v)| if v <= 0.0 { gi * v } else { 0.0 })
                            .sum()
                    } else {
                        0.0
                    };
                    pa.accumulate_grad(&[da]);
                }
                if pb.requires_grad() {
                    let ds = sb * (1.0 - sb);
                    let db: f64 = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gi, &v)| if v > 0.0 { gi * v * ds } else { 0.0 })
                        .sum();
                    pb.accumulate_grad(&[db]);
                }
            }),
        );
    }
    out
}

// ── Convolution ──────────────────────────────────────────────────────

/// Descriptor for a same-padded 3x3, stride-1 convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub const KERNEL: usize = 3;

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, Self::KERNEL, Self::KERNEL]
    }

    pub fn bias_shape(&self) -> [usize; 1] {
        [self.out_channels]
    }
}

fn expect_rank3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "{what} must be [C, H, W], got {:?}",
            x.shape()
        ))),
    }
}

/// Cross-correlation with odd-sized kernels, zero padding to preserve
/// spatial dims, stride 1, plus bias.
///
/// `x` is `[C_in, H, W]`, `weight` `[C_out, C_in, kh, kw]`, `bias`
/// `[C_out]`; the output is `[C_out, H, W]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = expect_rank3(x, "conv2d input")?;
    let (cout, wcin, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(format!(
                "conv2d weight must be [C_out, C_in, kh, kw], got {:?}",
                weight.shape()
            )))
        }
    };
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("conv2d kernel dims must be odd"));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }

    let out_data = {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        conv2d_forward(&xd, cin, h, w, &wd, cout, kh, kw, &bd)
    };
    if !out_data.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("conv2d produced a non-finite value"));
    }

    let track = should_track(&[x, weight, bias]);
    let out = Tensor::op_output(vec![cout, h, w], out_data, track);
    if track {
        let (px, pw, pb) = (x.clone(), weight.clone(), bias.clone());
        push_node(
            &out,
            Box::new(move |g| {
                let xd = px.data();
                let wd = pw.data();
                if px.requires_grad() {
                    let gx = conv2d_backward_input(g, &wd, cin, cout, h, w, kh, kw);
                    px.accumulate_grad(&gx);
                }
                if pw.requires_grad() {
                    let gw = conv2d_backward_weight(g, &xd, cin, cout, h, w, kh, kw);
                    pw.accumulate_grad(&gw);
                }
                if pb.requires_grad() {
                    let hw = h * w;
                    let gb: Vec<f64> = (0..cout)
                        .map(|co| g[co * hw..(co + 1) * hw].iter().sum())
                        .collect();
                    pb.accumulate_grad(&gb);
                }
            }),
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(co, plane)| {
        plane.fill(bias[co]);
        for ci in 0..cin {
            let xplane = &x[ci * hw..(ci + 1) * hw];
            for u in 0..kh {
                let dy = u as isize - ph as isize;
                for v in 0..kw {
                    let dx = v as isize - pw as isize;
                    let wv = wt[((co * cin + ci) * kh + u) * kw + v];
                    shifted_axpy(plane, xplane, h, w, dy, dx, wv);
                }
            }
        }
    });
    out
}

/// `dst[y][x] += wv * src[y + dy][x + dx]` over the valid overlap.
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w + x0..y * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += wv * *s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64],
    wt: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let hw = h * w;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = vec![0.0; cin * hw];
    gx.par_chunks_mut(hw).enumerate().for_each(|(ci, plane)| {
        for co in 0..cout {
            let gplane = &g[co * hw..(co + 1) * hw];
            for u in 0..kh {
                let dy = u as isize - ph as isize;
                for v in 0..kw {
                    let dx = v as isize - pw as isize;
                    let wv = wt[((co * cin + ci) * kh + u) * kw + v];
                    // adjoint of the forward shift: offsets negate
                    shifted_axpy(plane, gplane, h, w, -dy, -dx, wv);
                }
            }
        }
    });
    gx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let hw = h * w;
    let (ph, pw) = (kh / 2, kw / 2);
    let kk = kh * kw;
    let mut gw = vec![0.0; cout * cin * kk];
    gw.par_chunks_mut(cin * kk).enumerate().for_each(|(co, wrow)| {
        let gplane = &g[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let xplane = &x[ci * hw..(ci + 1) * hw];
            for u in 0..kh {
                let dy = u as isize - ph as isize;
                for v in 0..kw {
                    let dx = v as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    let mut acc = 0.0;
                    if x0 < x1 {
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let xrow = &xplane[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (gv, xv) in grow.iter().zip(xrow) {
                                acc += gv * xv;
                            }
                        }
                    }
                    wrow[(ci * kh + u) * kw + v] = acc;
                }
            }
        }
    });
    gw
}

// ── Max pooling ──────────────────────────────────────────────────────

/// 2x2 max pooling with stride 2. The gradient routes to the argmax
/// element of each window; ties go to the first element in row-major
/// scan order.
pub fn maxpool2d(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_rank3(x, "maxpool2d input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2d requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let hw = h * w;
    let ohw = oh * ow;

    let mut out_data = vec![0.0; c * ohw];
    let mut argmax = vec![0usize; c * ohw];
    {
        let xd = x.data();
        for ci in 0..c {
            let xplane = &xd[ci * hw..(ci + 1) * hw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for wy in 0..2 {
                        for wx in 0..2 {
                            let idx = (2 * oy + wy) * w + 2 * ox + wx;
                            let v = xplane[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out_data[ci * ohw + oy * ow + ox] = best;
                    argmax[ci * ohw + oy * ow + ox] = ci * hw + best_idx;
                }
            }
        }
    }

    let track = should_track(&[x]);
    let out = Tensor::op_output(vec![c, oh, ow], out_data, track);
    if track {
        let px = x.clone();
        push_node(
            &out,
            Box::new(move |g| {
                if px.requires_grad() {
                    let mut gx = vec![0.0; px.numel()];
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        gx[src] += gi;
                    }
                    px.accumulate_grad(&gx);
                }
            }),
        );
    }
    Ok(out)
}

// ── Transposed convolution ───────────────────────────────────────────

/// 2x2, stride-2 transposed convolution: exact doubling of spatial dims.
///
/// `x` is `[C_in, H, W]` and `weight` `[C_in, C_out, 2, 2]`; the output
/// is `[C_out, 2H, 2W]` with
/// `y[co, 2i+u, 2j+v] = sum_ci x[ci, i, j] * weight[ci, co, u, v]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = expect_rank3(x, "conv_transpose2d input")?;
    let (wcin, cout) = match *weight.shape() {
        [a, b, 2, 2] => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "conv_transpose2d weight must be [C_in, C_out, 2, 2], got {:?}",
                weight.shape()
            )))
        }
    };
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv_transpose2d channel mismatch: input has {cin}, weight expects {wcin}"
        )));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let hw = h * w;
    let ohw = oh * ow;

    let out_data = {
        let xguard = x.data();
        let wguard = weight.data();
        let xd: &[f64] = &xguard;
        let wd: &[f64] = &wguard;
        let mut out = vec![0.0; cout * ohw];
        out.par_chunks_mut(ohw).enumerate().for_each(|(co, plane)| {
            // each output pixel reads exactly one input pixel per channel
            for (p, o) in plane.iter_mut().enumerate() {
                let (py, px_) = (p / ow, p % ow);
                let (iy, u) = (py / 2, py % 2);
                let (ix, v) = (px_ / 2, px_ % 2);
                let mut acc = 0.0;
                for ci in 0..cin {
                    acc += xd[ci * hw + iy * w + ix] * wd[((ci * cout + co) * 2 + u) * 2 + v];
                }
                *o = acc;
            }
        });
        out
    };
    if !out_data.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("conv_transpose2d produced a non-finite value"));
    }

    let track = should_track(&[x, weight]);
    let out = Tensor::op_output(vec![cout, oh, ow], out_data, track);
    if track {
        let (px, pw) = (x.clone(), weight.clone());
        push_node(
            &out,
            Box::new(move |g| {
                let xguard = px.data();
                let wguard = pw.data();
                let xd: &[f64] = &xguard;
                let wd: &[f64] = &wguard;
                if px.requires_grad() {
                    let mut gx = vec![0.0; cin * hw];
                    gx.par_chunks_mut(hw).enumerate().for_each(|(ci, plane)| {
                        for (p, o) in plane.iter_mut().enumerate() {
                            let (iy, ix) = (p / w, p % w);
                            let mut acc = 0.0;
                            for co in 0..cout {
                                for u in 0..2 {
                                    for v in 0..2 {
                                        acc += g[co * ohw + (2 * iy + u) * ow + 2 * ix + v]
                                            * wd[((ci * cout + co) * 2 + u) * 2 + v];
                                    }
                                }
                            }
                            *o = acc;
                        }
                    });
                    px.accumulate_grad(&gx);
                }
                if pw.requires_grad() {
                    let mut gw = vec![0.0; cin * cout * 4];
                    gw.par_chunks_mut(cout * 4).enumerate().for_each(|(ci, wrow)| {
                        let xplane = &xd[ci * hw..(ci + 1) * hw];
                        for co in 0..cout {
                            let gplane = &g[co * ohw..(co + 1) * ohw];
                            for u in 0..2 {
                                for v in 0..2 {
                                    let mut acc = 0.0;
                                    for iy in 0..h {
                                        for ix in 0..w {
                                            acc += xplane[iy * w + ix]
                                                * gplane[(2 * iy + u) * ow + 2 * ix + v];
                                        }
                                    }
                                    wrow[(co * 2 + u) * 2 + v] = acc;
                                }
                            }
                        }
                    });
                    pw.accumulate_grad(&gw);
                }
            }),
        );
    }
    Ok(out)
}

// ── Channel concatenation ────────────────────────────────────────────

/// Stacks `a`'s channels before `b`'s; the backward pass splits the
/// gradient at the same boundary.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = expect_rank3(a, "concat lhs")?;
    let (cb, hb, wb) = expect_rank3(b, "concat rhs")?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(format!(
            "concat spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
        )));
    }
    let mut out_data = Vec::with_capacity((ca + cb) * ha * wa);
    out_data.extend_from_slice(&a.data());
    out_data.extend_from_slice(&b.data());

    let track = should_track(&[a, b]);
    let out = Tensor::op_output(vec![ca + cb, ha, wa], out_data, track);
    if track {
        let (pa, pb) = (a.clone(), b.clone());
        let split = ca * ha * wa;
        push_node(
            &out,
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.accumulate_grad(&g[..split]);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&g[split..]);
                }
            }),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, check_gradients_at};
    use crate::rng;
    use crate::tensor::{sum, Tape, Tensor};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = rng::stream(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn relu_values_and_grad() {
        let out = relu(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(out.data_vec(), vec![0.0, 0.0, 2.0]);

        let x = Tensor::param(&[2], vec![-1.0, 2.0]).unwrap();
        let (root, tape) = Tape::record(|| sum(&relu(&x)).unwrap());
        tape.backward(&root).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let out = relu(&Tensor::new(&[4], vec![-3.0, -0.5, -1e-9, -100.0]).unwrap());
        assert!(out.data_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn arelu_analytic_cases() {
        // negative branch: C(0.5) = 0.5
        let p = AReluParams::new(0.5, 0.3);
        let y = arelu(&Tensor::new(&[1], vec![-2.0]).unwrap(), &p);
        assert_eq!(y.value(), -1.0);

        // positive branch: 1 + sigmoid(0) = 1.5
        let p = AReluParams::new(0.7, 0.0);
        let y = arelu(&Tensor::new(&[1], vec![2.0]).unwrap(), &p);
        assert_eq!(y.value(), 3.0);

        // clamp saturation: C(1.5) = 0.99
        let p = AReluParams::new(1.5, 0.0);
        let y = arelu(&Tensor::new(&[1], vec![-1.0]).unwrap(), &p);
        assert_eq!(y.value(), -0.99);

        // dF/dbeta at x=2, beta=0 -> 2 * 0.25 = 0.5
        let p = AReluParams::new(0.5, 0.0);
        let x = Tensor::new(&[1], vec![2.0]).unwrap();
        let (root, tape) = Tape::record(|| sum(&arelu(&x, &p)).unwrap());
        tape.backward(&root).unwrap();
        assert!((p.beta.grad().unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn arelu_gradients_match_finite_differences() {
        let x = rand_tensor(&[16], rng::derive_seed(3, "arelu-x", 0), -1.0, 1.0);
        let alpha = Tensor::param_scalar(0.6);
        let beta = Tensor::param_scalar(0.4);

        let f_x = |t: &Tensor| {
            let p = AReluParams {
                alpha: alpha.clone(),
                beta: beta.clone(),
            };
            sum(&arelu(t, &p)).unwrap()
        };
        let rep = check_gradients(f_x, &x, 1e-4).unwrap();
        assert!(rep.max_error < 1e-4, "x grad error {}", rep.max_error);

        let f_alpha = |a: &Tensor| {
            let p = AReluParams {
                alpha: a.clone(),
                beta: beta.clone(),
            };
            sum(&arelu(&x, &p)).unwrap()
        };
        let rep = check_gradients(f_alpha, &alpha, 1e-4).unwrap();
        assert!(rep.max_error < 1e-6, "alpha grad error {}", rep.max_error);

        let f_beta = |b: &Tensor| {
            let p = AReluParams {
                alpha: alpha.clone(),
                beta: b.clone(),
            };
            sum(&arelu(&x, &p)).unwrap()
        };
        let rep = check_gradients(f_beta, &beta, 1e-4).unwrap();
        assert!(rep.max_error < 1e-6, "beta grad error {}", rep.max_error);
    }

    #[test]
    fn relu_kink_is_flagged() {
        let x = Tensor::param(&[3], vec![-0.5, 0.0, 0.7]).unwrap();
        let rep = check_gradients(|t| sum(&relu(t)).unwrap(), &x, 1e-4).unwrap();
        assert_eq!(rep.kinks, vec![1]);
        assert!(rep.max_error < 1e-9, "linear regions exact, got {}", rep.max_error);
    }

    #[test]
    fn conv_ones_kernel_on_ones() {
        let x = Tensor::new(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, &b).unwrap();
        let expect = vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.data_vec(), expect);
    }

    /// Direct triple-loop convolution, kept independent of the kernel
    /// implementation above.
    #[allow(clippy::too_many_arguments)]
    fn naive_conv(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        cout: usize,
        k: usize,
        bias: &[f64],
    ) -> Vec<f64> {
        let p = k / 2;
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let sy = y as isize + u as isize - p as isize;
                                let sx = xx as isize + v as isize - p as isize;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += wt[((co * cin + ci) * k + u) * k + v]
                                        * x[ci * h * w + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[co * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let x = rand_tensor(&[3, 6, 5], rng::derive_seed(5, "conv-x", 0), -1.0, 1.0);
        let w = rand_tensor(&[4, 3, 3, 3], rng::derive_seed(5, "conv-w", 0), -1.0, 1.0);
        let b = rand_tensor(&[4], rng::derive_seed(5, "conv-b", 0), -1.0, 1.0);
        let y = conv2d(&x, &w, &b).unwrap();
        let oracle = naive_conv(&x.data(), 3, 6, 5, &w.data(), 4, 3, &b.data());
        for (a, o) in y.data_vec().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_dirac_kernel_is_identity() {
        let x = rand_tensor(&[1, 4, 4], rng::derive_seed(6, "dirac", 0), -2.0, 2.0);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.data_vec(), x.data_vec());
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = Tensor::new(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let w = Tensor::new(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let b = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(conv2d(&x, &w, &b).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand_tensor(&[1, 4, 4], rng::derive_seed(7, "cg-x", 0), -1.0, 1.0);
        let w = rand_tensor(&[2, 1, 3, 3], rng::derive_seed(7, "cg-w", 0), -0.7, 0.7);
        let b = rand_tensor(&[2], rng::derive_seed(7, "cg-b", 0), -0.5, 0.5);

        let f_w = |t: &Tensor| sum(&conv2d(&x, t, &b).unwrap()).unwrap();
        let rep = check_gradients(f_w, &w, 1e-4).unwrap();
        assert!(rep.max_error < 1e-4, "weight grad error {}", rep.max_error);

        let f_x = |t: &Tensor| sum(&conv2d(t, &w, &b).unwrap()).unwrap();
        let rep = check_gradients(f_x, &x, 1e-4).unwrap();
        assert!(rep.max_error < 1e-4, "input grad error {}", rep.max_error);

        let f_b = |t: &Tensor| sum(&conv2d(&x, &w, t).unwrap()).unwrap();
        let rep = check_gradients(f_b, &b, 1e-4).unwrap();
        assert!(rep.max_error < 1e-6, "bias grad error {}", rep.max_error);
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.value(), 4.0);

        let odd = Tensor::new(&[1, 3, 2], vec![0.0; 6]).unwrap();
        assert!(maxpool2d(&odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan_order() {
        let x = Tensor::param(&[1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (root, tape) = Tape::record(|| sum(&maxpool2d(&x).unwrap()).unwrap());
        tape.backward(&root).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradient_mass_is_conserved() {
        let x = rand_tensor(&[1, 8, 8], rng::derive_seed(8, "pool", 0), -1.0, 1.0);
        let (root, tape) = Tape::record(|| sum(&maxpool2d(&x).unwrap()).unwrap());
        tape.backward(&root).unwrap();
        let total: f64 = x.grad().unwrap().iter().sum();
        // 16 output elements, each routing unit gradient to one input
        assert!((total - 16.0).abs() < 1e-12);
    }

    #[test]
    fn maxpool_recovers_nearest_upscale() {
        let orig = rand_tensor(&[2, 4, 4], rng::derive_seed(9, "up", 0), -1.0, 1.0);
        let od = orig.data_vec();
        let mut up = vec![0.0; 2 * 8 * 8];
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    up[c * 64 + y * 8 + x] = od[c * 16 + (y / 2) * 4 + x / 2];
                }
            }
        }
        let up = Tensor::new(&[2, 8, 8], up).unwrap();
        let pooled = maxpool2d(&up).unwrap();
        assert_eq!(pooled.data_vec(), od);
    }

    #[test]
    fn conv_transpose_single_pixel_broadcast() {
        let x = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let y = conv_transpose2d(&x, &w).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data_vec(), vec![1.5, -3.0, 6.0, 0.75]);
    }

    /// Strided valid convolution used only as the adjoint oracle.
    fn strided_conv_matrix(w: &[f64], cin: usize, cout: usize, oh: usize, ow: usize) -> Vec<Vec<f64>> {
        // maps [cout, 2*oh, 2*ow] -> [cin, oh, ow]:
        // out[ci, i, j] = sum_co sum_uv w[ci, co, u, v] * inp[co, 2i+u, 2j+v]
        let (ih, iw) = (2 * oh, 2 * ow);
        let in_len = cout * ih * iw;
        let out_len = cin * oh * ow;
        let mut m = vec![vec![0.0; in_len]; out_len];
        for ci in 0..cin {
            for i in 0..oh {
                for j in 0..ow {
                    let row = &mut m[ci * oh * ow + i * ow + j];
                    for co in 0..cout {
                        for u in 0..2 {
                            for v in 0..2 {
                                row[co * ih * iw + (2 * i + u) * iw + 2 * j + v] +=
                                    w[((ci * cout + co) * 2 + u) * 2 + v];
                            }
                        }
                    }
                }
            }
        }
        m
    }

    #[test]
    fn conv_transpose_is_adjoint_of_strided_conv() {
        // materialize both linear maps on 4x4 inputs and compare as
        // transposed matrices
        let (cin, cout, h, w) = (2, 3, 4, 4);
        let wt = rand_tensor(&[cin, cout, 2, 2], rng::derive_seed(10, "adj", 0), -1.0, 1.0);

        let in_len = cin * h * w;
        let out_len = cout * 2 * h * 2 * w;
        let mut fwd = vec![vec![0.0; in_len]; out_len];
        for k in 0..in_len {
            let mut unit = vec![0.0; in_len];
            unit[k] = 1.0;
            let x = Tensor::new(&[cin, h, w], unit).unwrap();
            let y = conv_transpose2d(&x, &wt).unwrap();
            for (r, v) in y.data_vec().into_iter().enumerate() {
                fwd[r][k] = v;
            }
        }

        let adj = strided_conv_matrix(&wt.data(), cin, cout, h, w);
        for r in 0..out_len {
            for k in 0..in_len {
                assert!(
                    (fwd[r][k] - adj[k][r]).abs() < 1e-12,
                    "mismatch at ({r}, {k})"
                );
            }
        }
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let x = rand_tensor(&[2, 3, 3], rng::derive_seed(12, "ct-x", 0), -1.0, 1.0);
        let w = rand_tensor(&[2, 2, 2, 2], rng::derive_seed(12, "ct-w", 0), -1.0, 1.0);

        let f_x = |t: &Tensor| sum(&conv_transpose2d(t, &w).unwrap()).unwrap();
        let rep = check_gradients(f_x, &x, 1e-4).unwrap();
        assert!(rep.max_error < 1e-4, "input grad error {}", rep.max_error);

        let f_w = |t: &Tensor| sum(&conv_transpose2d(&x, t).unwrap()).unwrap();
        let rep = check_gradients(f_w, &w, 1e-4).unwrap();
        assert!(rep.max_error < 1e-4, "weight grad error {}", rep.max_error);
    }

    #[test]
    fn concat_layout_and_roundtrip() {
        let a = Tensor::new(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::new(&[1, 2, 2], vec![0.0; 4]).unwrap();
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(&y.data_vec()[..4], &[1.0; 4]);
        assert_eq!(&y.data_vec()[4..], &[0.0; 4]);

        let tall = Tensor::new(&[1, 4, 2], vec![0.0; 8]).unwrap();
        assert!(concat_channels(&a, &tall).is_err());
    }

    #[test]
    fn concat_gradient_splits_and_conserves() {
        let a = rand_tensor(&[2, 2, 2], rng::derive_seed(13, "cc-a", 0), -1.0, 1.0);
        let b = rand_tensor(&[1, 2, 2], rng::derive_seed(13, "cc-b", 0), -1.0, 1.0);
        let (root, tape) = Tape::record(|| {
            let y = concat_channels(&a, &b).unwrap();
            sum(&y).unwrap()
        });
        tape.backward(&root).unwrap();
        let ga: f64 = a.grad().unwrap().iter().sum();
        let gb: f64 = b.grad().unwrap().iter().sum();
        assert_eq!(ga, 8.0);
        assert_eq!(gb, 4.0);
    }

    #[test]
    fn full_model_sized_conv_gradcheck_sampled() {
        // larger tensors: spot-check a handful of coordinates
        let x = rand_tensor(&[4, 8, 8], rng::derive_seed(14, "big-x", 0), -1.0, 1.0);
        let w = rand_tensor(&[8, 4, 3, 3], rng::derive_seed(14, "big-w", 0), -0.3, 0.3);
        let b = rand_tensor(&[8], rng::derive_seed(14, "big-b", 0), -0.1, 0.1);
        let f = |t: &Tensor| sum(&conv2d(&x, t, &b).unwrap()).unwrap();
        let idx: Vec<usize> = (0..w.numel()).step_by(37).collect();
        let rep = check_gradients_at(f, &w, 1e-4, &idx).unwrap();
        assert!(rep.max_error < 1e-4, "error {}", rep.max_error);
    }
}
