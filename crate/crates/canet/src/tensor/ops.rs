//! Differentiable tensor operations.
//!
//! Every op takes the active [`Tape`] first; when the tape is recording and
//! at least one argument is tracked, the op appends a backward function that
//! maps the output gradient to contributions on its parents.

use std::sync::Arc;

use super::tape::{BackwardFn, Tape};
use super::{Dims, Elem, LabelMap, Tensor};
use crate::error::{Error, Result};

// ── shape helpers ────────────────────────────────────────────────────

/// Output indices `o` with `0 <= o*stride + k_off - pad < len_in`.
#[inline]
fn valid_out_range(len_in: usize, k_off: usize, pad: usize, stride: usize, len_out: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if len_in + pad > k_off {
        ((len_in + pad - k_off - 1) / stride + 1).min(len_out)
    } else {
        0
    };
    (lo, hi)
}

fn conv_out_len(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k {
        return Err(Error::Shape {
            op,
            detail: format!("kernel {k} exceeds padded input extent {}", len + 2 * pad),
        });
    }
    let out = (len + 2 * pad - k) / stride + 1;
    if out == 0 {
        return Err(Error::Shape { op, detail: "output dimension would be non-positive".into() });
    }
    Ok(out)
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidArgument { op, detail: "stride must be >= 1".into() });
    }
    Ok(())
}

// ── convolution ──────────────────────────────────────────────────────

/// 2-D convolution. `weight` has dims (c_out, c_in, kh, kw); `bias`, when
/// present, has dims (1, c_out, 1, 1).
pub fn conv2d<E: Elem>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    check_stride("conv2d", stride)?;
    let xd = input.dims();
    let wd = weight.dims();
    if wd.c != xd.c {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("input has {} channels, weight expects {}", xd.c, wd.c),
        });
    }
    if let Some(b) = bias {
        let bd = b.dims();
        if bd != Dims::new(1, wd.n, 1, 1) {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias dims {bd} do not match {} output channels", wd.n),
            });
        }
    }
    let oh = conv_out_len("conv2d", xd.h, wd.h, stride, padding)?;
    let ow = conv_out_len("conv2d", xd.w, wd.w, stride, padding)?;
    let od = Dims::new(xd.n, wd.n, oh, ow);

    let out = conv2d_forward(input.data(), xd, weight.data(), wd, bias.map(|b| b.data()), stride, padding, od);

    let bias_node = bias.and_then(|b| b.node());
    let record: Option<BackwardFn<E>> = if tape.is_recording()
        && (input.node().is_some() || weight.node().is_some() || bias_node.is_some())
    {
        let x = input.data_arc();
        let w = weight.data_arc();
        let (xn, wn) = (input.node(), weight.node());
        Some(Box::new(move |g: &[E]| {
            let mut grads = Vec::new();
            if let Some(n) = xn {
                grads.push((n, conv2d_backward_input(g, od, &w, wd, xd, stride, padding)));
            }
            if let Some(n) = wn {
                grads.push((n, conv2d_backward_weight(g, od, &x, xd, wd, stride, padding)));
            }
            if let Some(n) = bias_node {
                grads.push((n, conv2d_backward_bias(g, od)));
            }
            grads
        }))
    } else {
        None
    };
    tape.finish("conv2d", od, Arc::new(out), record)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<E: Elem>(
    x: &[E],
    xd: Dims,
    w: &[E],
    wd: Dims,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
    od: Dims,
) -> Vec<E> {
    let mut out = vec![E::zero(); od.count()];
    for b in 0..xd.n {
        for oc in 0..wd.n {
            let oplane = &mut out[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
            if let Some(bs) = bias {
                oplane.fill(bs[oc]);
            }
            for ic in 0..xd.c {
                let xplane = &x[xd.at(b, ic, 0, 0)..xd.at(b, ic, 0, 0) + xd.plane()];
                for ky in 0..wd.h {
                    let (oh0, oh1) = valid_out_range(xd.h, ky, pad, stride, od.h);
                    for kx in 0..wd.w {
                        let wv = w[wd.at(oc, ic, ky, kx)];
                        let (ow0, ow1) = valid_out_range(xd.w, kx, pad, stride, od.w);
                        if ow1 <= ow0 {
                            continue;
                        }
                        for oy in oh0..oh1 {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut oplane[oy * od.w..(oy + 1) * od.w];
                            let xrow = &xplane[iy * xd.w..(iy + 1) * xd.w];
                            if stride == 1 {
                                let ix0 = ow0 + kx - pad;
                                for (o, &xv) in orow[ow0..ow1].iter_mut().zip(&xrow[ix0..ix0 + ow1 - ow0]) {
                                    *o = wv.mul_add(xv, *o);
                                }
                            } else {
                                for ox in ow0..ow1 {
                                    orow[ox] = wv.mul_add(xrow[ox * stride + kx - pad], orow[ox]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<E: Elem>(
    g: &[E],
    od: Dims,
    w: &[E],
    wd: Dims,
    xd: Dims,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let mut dx = vec![E::zero(); xd.count()];
    for b in 0..xd.n {
        for oc in 0..wd.n {
            let gplane = &g[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
            for ic in 0..xd.c {
                let dxplane = &mut dx[xd.at(b, ic, 0, 0)..xd.at(b, ic, 0, 0) + xd.plane()];
                for ky in 0..wd.h {
                    let (oh0, oh1) = valid_out_range(xd.h, ky, pad, stride, od.h);
                    for kx in 0..wd.w {
                        let wv = w[wd.at(oc, ic, ky, kx)];
                        let (ow0, ow1) = valid_out_range(xd.w, kx, pad, stride, od.w);
                        if ow1 <= ow0 {
                            continue;
                        }
                        for oy in oh0..oh1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * od.w..(oy + 1) * od.w];
                            let dxrow = &mut dxplane[iy * xd.w..(iy + 1) * xd.w];
                            if stride == 1 {
                                let ix0 = ow0 + kx - pad;
                                for (d, &gv) in dxrow[ix0..ix0 + ow1 - ow0].iter_mut().zip(&grow[ow0..ow1]) {
                                    *d = wv.mul_add(gv, *d);
                                }
                            } else {
                                for ox in ow0..ow1 {
                                    let ix = ox * stride + kx - pad;
                                    dxrow[ix] = wv.mul_add(grow[ox], dxrow[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight<E: Elem>(
    g: &[E],
    od: Dims,
    x: &[E],
    xd: Dims,
    wd: Dims,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let mut dw = vec![E::zero(); wd.count()];
    for b in 0..xd.n {
        for oc in 0..wd.n {
            let gplane = &g[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
            for ic in 0..xd.c {
                let xplane = &x[xd.at(b, ic, 0, 0)..xd.at(b, ic, 0, 0) + xd.plane()];
                for ky in 0..wd.h {
                    let (oh0, oh1) = valid_out_range(xd.h, ky, pad, stride, od.h);
                    for kx in 0..wd.w {
                        let (ow0, ow1) = valid_out_range(xd.w, kx, pad, stride, od.w);
                        if ow1 <= ow0 {
                            continue;
                        }
                        let mut acc = E::zero();
                        for oy in oh0..oh1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * od.w..(oy + 1) * od.w];
                            let xrow = &xplane[iy * xd.w..(iy + 1) * xd.w];
                            if stride == 1 {
                                let ix0 = ow0 + kx - pad;
                                for (&gv, &xv) in grow[ow0..ow1].iter().zip(&xrow[ix0..ix0 + ow1 - ow0]) {
                                    acc = gv.mul_add(xv, acc);
                                }
                            } else {
                                for ox in ow0..ow1 {
                                    acc = grow[ox].mul_add(xrow[ox * stride + kx - pad], acc);
                                }
                            }
                        }
                        let idx = wd.at(oc, ic, ky, kx);
                        dw[idx] = dw[idx] + acc;
                    }
                }
            }
        }
    }
    dw
}

fn conv2d_backward_bias<E: Elem>(g: &[E], od: Dims) -> Vec<E> {
    let mut db = vec![E::zero(); od.c];
    for b in 0..od.n {
        for (oc, d) in db.iter_mut().enumerate() {
            let gplane = &g[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
            *d = *d + gplane.iter().copied().sum();
        }
    }
    db
}

// ── transposed convolution ───────────────────────────────────────────

/// 2-D transposed convolution (adjoint of unpadded `conv2d`). `weight` has
/// dims (c_in, c_out, kh, kw); output spatial extent is `(in - 1)*stride + k`.
pub fn conv_transpose2d<E: Elem>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
) -> Result<Tensor<E>> {
    check_stride("conv_transpose2d", stride)?;
    let xd = input.dims();
    let wd = weight.dims();
    if wd.n != xd.c {
        return Err(Error::Shape {
            op: "conv_transpose2d",
            detail: format!("input has {} channels, weight expects {}", xd.c, wd.n),
        });
    }
    let od = Dims::new(xd.n, wd.c, (xd.h - 1) * stride + wd.h, (xd.w - 1) * stride + wd.w);

    let out = convt_forward(input.data(), xd, weight.data(), wd, stride, od);

    let record: Option<BackwardFn<E>> =
        if tape.is_recording() && (input.node().is_some() || weight.node().is_some()) {
            let x = input.data_arc();
            let w = weight.data_arc();
            let (xn, wn) = (input.node(), weight.node());
            Some(Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(n) = xn {
                    grads.push((n, convt_backward_input(g, od, &w, wd, xd, stride)));
                }
                if let Some(n) = wn {
                    grads.push((n, convt_backward_weight(g, od, &x, xd, wd, stride)));
                }
                grads
            }))
        } else {
            None
        };
    tape.finish("conv_transpose2d", od, Arc::new(out), record)
}

fn convt_forward<E: Elem>(x: &[E], xd: Dims, w: &[E], wd: Dims, stride: usize, od: Dims) -> Vec<E> {
    let mut out = vec![E::zero(); od.count()];
    for b in 0..xd.n {
        for oc in 0..wd.c {
            let oplane = &mut out[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
            for ic in 0..xd.c {
                let xplane = &x[xd.at(b, ic, 0, 0)..xd.at(b, ic, 0, 0) + xd.plane()];
                for ky in 0..wd.h {
                    for kx in 0..wd.w {
                        let wv = w[wd.at(ic, oc, ky, kx)];
                        for iy in 0..xd.h {
                            let oy = iy * stride + ky;
                            let xrow = &xplane[iy * xd.w..(iy + 1) * xd.w];
                            let orow = &mut oplane[oy * od.w..(oy + 1) * od.w];
                            if stride == 1 {
                                for (o, &xv) in orow[kx..kx + xd.w].iter_mut().zip(xrow) {
                                    *o = wv.mul_add(xv, *o);
                                }
                            } else {
                                for (ix, &xv) in xrow.iter().enumerate() {
                                    let ox = ix * stride + kx;
                                    orow[ox] = wv.mul_add(xv, orow[ox]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn convt_backward_input<E: Elem>(g: &[E], od: Dims, w: &[E], wd: Dims, xd: Dims, stride: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); xd.count()];
    for b in 0..xd.n {
        for ic in 0..xd.c {
            let dxplane = &mut dx[xd.at(b, ic, 0, 0)..xd.at(b, ic, 0, 0) + xd.plane()];
            for oc in 0..wd.c {
                let gplane = &g[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
                for ky in 0..wd.h {
                    for kx in 0..wd.w {
                        let wv = w[wd.at(ic, oc, ky, kx)];
                        for iy in 0..xd.h {
                            let grow = &gplane[(iy * stride + ky) * od.w..];
                            let dxrow = &mut dxplane[iy * xd.w..(iy + 1) * xd.w];
                            if stride == 1 {
                                for (d, &gv) in dxrow.iter_mut().zip(&grow[kx..kx + xd.w]) {
                                    *d = wv.mul_add(gv, *d);
                                }
                            } else {
                                for (ix, d) in dxrow.iter_mut().enumerate() {
                                    *d = wv.mul_add(grow[ix * stride + kx], *d);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn convt_backward_weight<E: Elem>(g: &[E], od: Dims, x: &[E], xd: Dims, wd: Dims, stride: usize) -> Vec<E> {
    let mut dw = vec![E::zero(); wd.count()];
    for b in 0..xd.n {
        for ic in 0..xd.c {
            let xplane = &x[xd.at(b, ic, 0, 0)..xd.at(b, ic, 0, 0) + xd.plane()];
            for oc in 0..wd.c {
                let gplane = &g[od.at(b, oc, 0, 0)..od.at(b, oc, 0, 0) + od.plane()];
                for ky in 0..wd.h {
                    for kx in 0..wd.w {
                        let mut acc = E::zero();
                        for iy in 0..xd.h {
                            let grow = &gplane[(iy * stride + ky) * od.w..];
                            let xrow = &xplane[iy * xd.w..(iy + 1) * xd.w];
                            if stride == 1 {
                                for (&xv, &gv) in xrow.iter().zip(&grow[kx..kx + xd.w]) {
                                    acc = xv.mul_add(gv, acc);
                                }
                            } else {
                                for (ix, &xv) in xrow.iter().enumerate() {
                                    acc = xv.mul_add(grow[ix * stride + kx], acc);
                                }
                            }
                        }
                        let idx = wd.at(ic, oc, ky, kx);
                        dw[idx] = dw[idx] + acc;
                    }
                }
            }
        }
    }
    dw
}

// ── pooling ──────────────────────────────────────────────────────────

/// Max pooling. Backward routes the gradient to the window's maximum; ties
/// go to the first maximal element in row-major order.
pub fn maxpool2d<E: Elem>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    check_stride("maxpool2d", stride)?;
    if k == 0 {
        return Err(Error::InvalidArgument { op: "maxpool2d", detail: "kernel must be >= 1".into() });
    }
    let xd = input.dims();
    let oh = conv_out_len("maxpool2d", xd.h, k, stride, padding)?;
    let ow = conv_out_len("maxpool2d", xd.w, k, stride, padding)?;
    let od = Dims::new(xd.n, xd.c, oh, ow);

    let x = input.data();
    let mut out = vec![E::zero(); od.count()];
    let mut argmax = vec![usize::MAX; od.count()];
    for b in 0..xd.n {
        for c in 0..xd.c {
            let xplane = &x[xd.at(b, c, 0, 0)..xd.at(b, c, 0, 0) + xd.plane()];
            let base = xd.at(b, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = E::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < padding || iy - padding >= xd.h {
                            continue;
                        }
                        let iy = iy - padding;
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < padding || ix - padding >= xd.w {
                                continue;
                            }
                            let ix = ix - padding;
                            let v = xplane[iy * xd.w + ix];
                            if v > best {
                                best = v;
                                best_idx = base + iy * xd.w + ix;
                            }
                        }
                    }
                    let o = od.at(b, c, oy, ox);
                    out[o] = if best_idx == usize::MAX { E::zero() } else { best };
                    argmax[o] = best_idx;
                }
            }
        }
    }

    let record: Option<BackwardFn<E>> = if tape.is_recording() && input.node().is_some() {
        let xn = input.node().unwrap();
        let xlen = xd.count();
        Some(Box::new(move |g: &[E]| {
            let mut dx = vec![E::zero(); xlen];
            for (o, &idx) in argmax.iter().enumerate() {
                if idx != usize::MAX {
                    dx[idx] = dx[idx] + g[o];
                }
            }
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish("maxpool2d", od, Arc::new(out), record)
}

/// Average pooling. Padding contributes zeros and the divisor is always
/// `k*k`, so backward distributes the gradient uniformly over the window.
pub fn avgpool2d<E: Elem>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    check_stride("avgpool2d", stride)?;
    if k == 0 {
        return Err(Error::InvalidArgument { op: "avgpool2d", detail: "kernel must be >= 1".into() });
    }
    let xd = input.dims();
    let oh = conv_out_len("avgpool2d", xd.h, k, stride, padding)?;
    let ow = conv_out_len("avgpool2d", xd.w, k, stride, padding)?;
    let od = Dims::new(xd.n, xd.c, oh, ow);
    let inv = E::one() / E::from_f((k * k) as f64);

    let x = input.data();
    let mut out = vec![E::zero(); od.count()];
    for b in 0..xd.n {
        for c in 0..xd.c {
            let xplane = &x[xd.at(b, c, 0, 0)..xd.at(b, c, 0, 0) + xd.plane()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::zero();
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < padding || iy - padding >= xd.h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < padding || ix - padding >= xd.w {
                                continue;
                            }
                            acc = acc + xplane[(iy - padding) * xd.w + (ix - padding)];
                        }
                    }
                    out[od.at(b, c, oy, ox)] = acc * inv;
                }
            }
        }
    }

    let record: Option<BackwardFn<E>> = if tape.is_recording() && input.node().is_some() {
        let xn = input.node().unwrap();
        Some(Box::new(move |g: &[E]| {
            let mut dx = vec![E::zero(); xd.count()];
            for b in 0..xd.n {
                for c in 0..xd.c {
                    let dxplane = &mut dx[xd.at(b, c, 0, 0)..xd.at(b, c, 0, 0) + xd.plane()];
                    for oy in 0..od.h {
                        for ox in 0..od.w {
                            let gv = g[od.at(b, c, oy, ox)] * inv;
                            for ky in 0..k {
                                let iy = oy * stride + ky;
                                if iy < padding || iy - padding >= xd.h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox * stride + kx;
                                    if ix < padding || ix - padding >= xd.w {
                                        continue;
                                    }
                                    let i = (iy - padding) * xd.w + (ix - padding);
                                    dxplane[i] = dxplane[i] + gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish("avgpool2d", od, Arc::new(out), record)
}

/// Mean over the full spatial extent: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_avg_pool<E: Elem>(tape: &mut Tape<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = input.dims();
    let od = Dims::new(xd.n, xd.c, 1, 1);
    let inv = E::one() / E::from_f(xd.plane() as f64);
    let x = input.data();
    let mut out = vec![E::zero(); od.count()];
    for b in 0..xd.n {
        for c in 0..xd.c {
            let plane = &x[xd.at(b, c, 0, 0)..xd.at(b, c, 0, 0) + xd.plane()];
            out[b * xd.c + c] = plane.iter().copied().sum::<E>() * inv;
        }
    }
    let record: Option<BackwardFn<E>> = if tape.is_recording() && input.node().is_some() {
        let xn = input.node().unwrap();
        Some(Box::new(move |g: &[E]| {
            let mut dx = vec![E::zero(); xd.count()];
            for (bc, &gv) in g.iter().enumerate() {
                let spread = gv * inv;
                let start = bc * xd.plane();
                for d in &mut dx[start..start + xd.plane()] {
                    *d = spread;
                }
            }
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish("global_avg_pool", od, Arc::new(out), record)
}

/// Maximum over the full spatial extent: (n, c, h, w) -> (n, c, 1, 1).
/// Ties route the gradient to the first maximum in row-major order.
pub fn global_max_pool<E: Elem>(tape: &mut Tape<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = input.dims();
    let od = Dims::new(xd.n, xd.c, 1, 1);
    let x = input.data();
    let mut out = vec![E::zero(); od.count()];
    let mut argmax = vec![0usize; od.count()];
    for bc in 0..xd.n * xd.c {
        let start = bc * xd.plane();
        let plane = &x[start..start + xd.plane()];
        let mut best = plane[0];
        let mut best_i = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        out[bc] = best;
        argmax[bc] = start + best_i;
    }
    let record: Option<BackwardFn<E>> = if tape.is_recording() && input.node().is_some() {
        let xn = input.node().unwrap();
        Some(Box::new(move |g: &[E]| {
            let mut dx = vec![E::zero(); xd.count()];
            for (bc, &idx) in argmax.iter().enumerate() {
                dx[idx] = dx[idx] + g[bc];
            }
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish("global_max_pool", od, Arc::new(out), record)
}

// ── channel reductions ───────────────────────────────────────────────

/// Per-pixel maximum over channels: (n, c, h, w) -> (n, 1, h, w).
pub fn channel_reduce_max<E: Elem>(tape: &mut Tape<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = input.dims();
    if xd.c == 0 {
        return Err(Error::Shape { op: "channel_reduce_max", detail: "zero channels".into() });
    }
    let od = Dims::new(xd.n, 1, xd.h, xd.w);
    let x = input.data();
    let mut out = vec![E::zero(); od.count()];
    let mut argc = vec![0usize; od.count()];
    for b in 0..xd.n {
        for p in 0..xd.plane() {
            let mut best = x[xd.at(b, 0, 0, 0) + p];
            let mut best_c = 0;
            for c in 1..xd.c {
                let v = x[xd.at(b, c, 0, 0) + p];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            out[b * xd.plane() + p] = best;
            argc[b * xd.plane() + p] = best_c;
        }
    }
    let record: Option<BackwardFn<E>> = if tape.is_recording() && input.node().is_some() {
        let xn = input.node().unwrap();
        Some(Box::new(move |g: &[E]| {
            let mut dx = vec![E::zero(); xd.count()];
            for b in 0..xd.n {
                for p in 0..xd.plane() {
                    let o = b * xd.plane() + p;
                    let idx = xd.at(b, argc[o], 0, 0) + p;
                    dx[idx] = dx[idx] + g[o];
                }
            }
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish("channel_reduce_max", od, Arc::new(out), record)
}

/// Per-pixel mean over channels: (n, c, h, w) -> (n, 1, h, w).
pub fn channel_reduce_mean<E: Elem>(tape: &mut Tape<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = input.dims();
    if xd.c == 0 {
        return Err(Error::Shape { op: "channel_reduce_mean", detail: "zero channels".into() });
    }
    let od = Dims::new(xd.n, 1, xd.h, xd.w);
    let inv = E::one() / E::from_f(xd.c as f64);
    let x = input.data();
    let mut out = vec![E::zero(); od.count()];
    for b in 0..xd.n {
        for p in 0..xd.plane() {
            let mut acc = E::zero();
            for c in 0..xd.c {
                acc = acc + x[xd.at(b, c, 0, 0) + p];
            }
            out[b * xd.plane() + p] = acc * inv;
        }
    }
    let record: Option<BackwardFn<E>> = if tape.is_recording() && input.node().is_some() {
        let xn = input.node().unwrap();
        Some(Box::new(move |g: &[E]| {
            let mut dx = vec![E::zero(); xd.count()];
            for b in 0..xd.n {
                for p in 0..xd.plane() {
                    let gv = g[b * xd.plane() + p] * inv;
                    for c in 0..xd.c {
                        let idx = xd.at(b, c, 0, 0) + p;
                        dx[idx] = dx[idx] + gv;
                    }
                }
            }
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish("channel_reduce_mean", od, Arc::new(out), record)
}

// ── concatenation ────────────────────────────────────────────────────

/// Concatenate along the channel dimension, order preserved.
pub fn concat_channels<E: Elem>(tape: &mut Tape<E>, parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts.first().ok_or(Error::Shape {
        op: "concat_channels",
        detail: "need at least one tensor".into(),
    })?;
    let fd = first.dims();
    let mut c_total = 0;
    for p in parts {
        let pd = p.dims();
        if pd.n != fd.n || pd.h != fd.h || pd.w != fd.w {
            return Err(Error::Shape {
                op: "concat_channels",
                detail: format!("part dims {pd} incompatible with {fd}"),
            });
        }
        c_total += pd.c;
    }
    let od = Dims::new(fd.n, c_total, fd.h, fd.w);
    let mut out = vec![E::zero(); od.count()];
    for b in 0..fd.n {
        let mut c_off = 0;
        for p in parts {
            let pd = p.dims();
            let chunk = pd.c * pd.plane();
            let src = &p.data()[b * chunk..(b + 1) * chunk];
            let dst_start = od.at(b, c_off, 0, 0);
            out[dst_start..dst_start + chunk].copy_from_slice(src);
            c_off += pd.c;
        }
    }

    let any_tracked = parts.iter().any(|p| p.node().is_some());
    let record: Option<BackwardFn<E>> = if tape.is_recording() && any_tracked {
        // (node, channel offset, channel count) per tracked part
        let mut tracked = Vec::new();
        let mut c_off = 0;
        for p in parts {
            if let Some(n) = p.node() {
                tracked.push((n, c_off, p.dims().c));
            }
            c_off += p.dims().c;
        }
        Some(Box::new(move |g: &[E]| {
            tracked
                .iter()
                .map(|&(node, c_off, c)| {
                    let mut dp = vec![E::zero(); od.n * c * od.plane()];
                    for b in 0..od.n {
                        let src = od.at(b, c_off, 0, 0);
                        let chunk = c * od.plane();
                        dp[b * chunk..(b + 1) * chunk].copy_from_slice(&g[src..src + chunk]);
                    }
                    (node, dp)
                })
                .collect()
        }))
    } else {
        None
    };
    tape.finish("concat_channels", od, Arc::new(out), record)
}

// ── elementwise ──────────────────────────────────────────────────────

fn unary<E: Elem>(
    tape: &mut Tape<E>,
    name: &'static str,
    x: &Tensor<E>,
    f: impl Fn(E) -> E,
    df: impl Fn(E, E) -> E + 'static,
) -> Result<Tensor<E>> {
    let out = Arc::new(x.data().iter().map(|&v| f(v)).collect::<Vec<E>>());
    let record: Option<BackwardFn<E>> = if tape.is_recording() && x.node().is_some() {
        let xn = x.node().unwrap();
        let xs = x.data_arc();
        let ys = Arc::clone(&out);
        Some(Box::new(move |g: &[E]| {
            let dx = g
                .iter()
                .zip(xs.iter().zip(ys.iter()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![(xn, dx)]
        }))
    } else {
        None
    };
    tape.finish(name, x.dims(), out, record)
}

fn sigmoid_scalar<E: Elem>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

/// Logistic sigmoid, numerically stable for large magnitudes.
pub fn sigmoid<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    unary(tape, "sigmoid", x, sigmoid_scalar, |_, y| y * (E::one() - y))
}

pub fn relu<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    unary(
        tape,
        "relu",
        x,
        |v| if v > E::zero() { v } else { E::zero() },
        |xv, _| if xv > E::zero() { E::one() } else { E::zero() },
    )
}

pub fn relu6<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let six = E::from_f(6.0);
    unary(
        tape,
        "relu6",
        x,
        move |v| v.max(E::zero()).min(six),
        move |xv, _| if xv > E::zero() && xv < six { E::one() } else { E::zero() },
    )
}

/// `1 - x` elementwise.
pub fn one_minus<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    unary(tape, "one_minus", x, |v| E::one() - v, |_, _| -E::one())
}

fn check_same_dims<E: Elem>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op,
            detail: format!("operands have dims {} and {}", a.dims(), b.dims()),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Elem>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_dims("add", a, b)?;
    let out: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let record: Option<BackwardFn<E>> =
        if tape.is_recording() && (a.node().is_some() || b.node().is_some()) {
            let (an, bn) = (a.node(), b.node());
            Some(Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(n) = an {
                    grads.push((n, g.to_vec()));
                }
                if let Some(n) = bn {
                    grads.push((n, g.to_vec()));
                }
                grads
            }))
        } else {
            None
        };
    tape.finish("add", a.dims(), Arc::new(out), record)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<E: Elem>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_dims("mul", a, b)?;
    let out: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let record: Option<BackwardFn<E>> =
        if tape.is_recording() && (a.node().is_some() || b.node().is_some()) {
            let (an, bn) = (a.node(), b.node());
            let (av, bv) = (a.data_arc(), b.data_arc());
            Some(Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(n) = an {
                    grads.push((n, g.iter().zip(bv.iter()).map(|(&gv, &y)| gv * y).collect()));
                }
                if let Some(n) = bn {
                    grads.push((n, g.iter().zip(av.iter()).map(|(&gv, &x)| gv * x).collect()));
                }
                grads
            }))
        } else {
            None
        };
    tape.finish("mul", a.dims(), Arc::new(out), record)
}

/// Multiply each (batch, channel) plane of `x` by the matching scalar in
/// `gate`, which has dims (n, c, 1, 1).
pub fn scale_channels<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>, gate: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = x.dims();
    let gd = gate.dims();
    if gd != Dims::new(xd.n, xd.c, 1, 1) {
        return Err(Error::Shape {
            op: "scale_channels",
            detail: format!("gate dims {gd} do not match input {xd}"),
        });
    }
    let plane = xd.plane();
    let mut out = vec![E::zero(); xd.count()];
    for bc in 0..xd.n * xd.c {
        let gv = gate.data()[bc];
        let src = &x.data()[bc * plane..(bc + 1) * plane];
        for (o, &xv) in out[bc * plane..(bc + 1) * plane].iter_mut().zip(src) {
            *o = gv * xv;
        }
    }
    let record: Option<BackwardFn<E>> =
        if tape.is_recording() && (x.node().is_some() || gate.node().is_some()) {
            let (xn, gn) = (x.node(), gate.node());
            let (xs, gs) = (x.data_arc(), gate.data_arc());
            Some(Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(n) = xn {
                    let mut dx = vec![E::zero(); xd.count()];
                    for bc in 0..xd.n * xd.c {
                        let gv = gs[bc];
                        for (d, &up) in dx[bc * plane..(bc + 1) * plane]
                            .iter_mut()
                            .zip(&g[bc * plane..(bc + 1) * plane])
                        {
                            *d = gv * up;
                        }
                    }
                    grads.push((n, dx));
                }
                if let Some(n) = gn {
                    let mut dg = vec![E::zero(); xd.n * xd.c];
                    for (bc, d) in dg.iter_mut().enumerate() {
                        let mut acc = E::zero();
                        for (up, &xv) in g[bc * plane..(bc + 1) * plane].iter().zip(&xs[bc * plane..(bc + 1) * plane])
                        {
                            acc = up.mul_add(xv, acc);
                        }
                        *d = acc;
                    }
                    grads.push((n, dg));
                }
                grads
            }))
        } else {
            None
        };
    tape.finish("scale_channels", xd, Arc::new(out), record)
}

/// Multiply every channel of `x` by the per-pixel map `gate`, which has dims
/// (n, 1, h, w).
pub fn scale_spatial<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>, gate: &Tensor<E>) -> Result<Tensor<E>> {
    let xd = x.dims();
    let gd = gate.dims();
    if gd != Dims::new(xd.n, 1, xd.h, xd.w) {
        return Err(Error::Shape {
            op: "scale_spatial",
            detail: format!("gate dims {gd} do not match input {xd}"),
        });
    }
    let plane = xd.plane();
    let mut out = vec![E::zero(); xd.count()];
    for b in 0..xd.n {
        let gplane = &gate.data()[b * plane..(b + 1) * plane];
        for c in 0..xd.c {
            let start = xd.at(b, c, 0, 0);
            for (i, (&xv, &gv)) in x.data()[start..start + plane].iter().zip(gplane).enumerate() {
                out[start + i] = xv * gv;
            }
        }
    }
    let record: Option<BackwardFn<E>> =
        if tape.is_recording() && (x.node().is_some() || gate.node().is_some()) {
            let (xn, gn) = (x.node(), gate.node());
            let (xs, gs) = (x.data_arc(), gate.data_arc());
            Some(Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(n) = xn {
                    let mut dx = vec![E::zero(); xd.count()];
                    for b in 0..xd.n {
                        let gplane = &gs[b * plane..(b + 1) * plane];
                        for c in 0..xd.c {
                            let start = xd.at(b, c, 0, 0);
                            for (i, (&up, &gv)) in g[start..start + plane].iter().zip(gplane).enumerate() {
                                dx[start + i] = up * gv;
                            }
                        }
                    }
                    grads.push((n, dx));
                }
                if let Some(n) = gn {
                    let mut dg = vec![E::zero(); xd.n * plane];
                    for b in 0..xd.n {
                        for c in 0..xd.c {
                            let start = xd.at(b, c, 0, 0);
                            for (i, (&up, &xv)) in g[start..start + plane].iter().zip(&xs[start..start + plane]).enumerate()
                            {
                                let o = b * plane + i;
                                dg[o] = up.mul_add(xv, dg[o]);
                            }
                        }
                    }
                    grads.push((n, dg));
                }
                grads
            }))
        } else {
            None
        };
    tape.finish("scale_spatial", xd, Arc::new(out), record)
}

/// Sum of all elements as a 1x1x1x1 tensor.
pub fn sum_all<E: Elem>(tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let total: E = x.data().iter().copied().sum();
    let od = Dims::new(1, 1, 1, 1);
    let record: Option<BackwardFn<E>> = if tape.is_recording() && x.node().is_some() {
        let xn = x.node().unwrap();
        let len = x.dims().count();
        Some(Box::new(move |g: &[E]| vec![(xn, vec![g[0]; len])]))
    } else {
        None
    };
    tape.finish("sum_all", od, Arc::new(vec![total]), record)
}

// ── linear ───────────────────────────────────────────────────────────

/// Affine map on flattened features. `input` has dims (n, f, 1, 1), `weight`
/// (out, f, 1, 1), and `bias`, when present, (1, out, 1, 1).
pub fn linear<E: Elem>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let xd = input.dims();
    let wd = weight.dims();
    if xd.h != 1 || xd.w != 1 {
        return Err(Error::Shape {
            op: "linear",
            detail: format!("input must be flattened to (n, f, 1, 1), got {xd}"),
        });
    }
    if wd.c != xd.c || wd.h != 1 || wd.w != 1 {
        return Err(Error::Shape {
            op: "linear",
            detail: format!("weight dims {wd} do not match {} input features", xd.c),
        });
    }
    if let Some(b) = bias {
        if b.dims() != Dims::new(1, wd.n, 1, 1) {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("bias dims {} do not match {} outputs", b.dims(), wd.n),
            });
        }
    }
    let (n, f, o) = (xd.n, xd.c, wd.n);
    let od = Dims::new(n, o, 1, 1);
    let x = input.data();
    let w = weight.data();
    let mut out = vec![E::zero(); n * o];
    for b in 0..n {
        let xrow = &x[b * f..(b + 1) * f];
        for j in 0..o {
            let wrow = &w[j * f..(j + 1) * f];
            let mut acc = bias.map(|bs| bs.data()[j]).unwrap_or_else(E::zero);
            for (&wv, &xv) in wrow.iter().zip(xrow) {
                acc = wv.mul_add(xv, acc);
            }
            out[b * o + j] = acc;
        }
    }

    let bias_node = bias.and_then(|b| b.node());
    let record: Option<BackwardFn<E>> = if tape.is_recording()
        && (input.node().is_some() || weight.node().is_some() || bias_node.is_some())
    {
        let (xn, wn) = (input.node(), weight.node());
        let (xs, ws) = (input.data_arc(), weight.data_arc());
        Some(Box::new(move |g: &[E]| {
            let mut grads = Vec::new();
            if let Some(nid) = xn {
                let mut dx = vec![E::zero(); n * f];
                for b in 0..n {
                    for j in 0..o {
                        let gv = g[b * o + j];
                        let wrow = &ws[j * f..(j + 1) * f];
                        for (d, &wv) in dx[b * f..(b + 1) * f].iter_mut().zip(wrow) {
                            *d = gv.mul_add(wv, *d);
                        }
                    }
                }
                grads.push((nid, dx));
            }
            if let Some(nid) = wn {
                let mut dw = vec![E::zero(); o * f];
                for b in 0..n {
                    let xrow = &xs[b * f..(b + 1) * f];
                    for j in 0..o {
                        let gv = g[b * o + j];
                        for (d, &xv) in dw[j * f..(j + 1) * f].iter_mut().zip(xrow) {
                            *d = gv.mul_add(xv, *d);
                        }
                    }
                }
                grads.push((nid, dw));
            }
            if let Some(nid) = bias_node {
                let mut db = vec![E::zero(); o];
                for b in 0..n {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d = *d + g[b * o + j];
                    }
                }
                grads.push((nid, db));
            }
            grads
        }))
    } else {
        None
    };
    tape.finish("linear", od, Arc::new(out), record)
}

// ── loss ─────────────────────────────────────────────────────────────

/// Mean two-class softmax cross-entropy over every pixel of every batch
/// element. `logits` has dims (n, 2, h, w); channel 1 is the change class.
pub fn softmax_cross_entropy<E: Elem>(
    tape: &mut Tape<E>,
    logits: &Tensor<E>,
    target: &LabelMap,
) -> Result<Tensor<E>> {
    let ld = logits.dims();
    if ld.c != 2 {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            detail: format!("logits must have 2 channels, got {}", ld.c),
        });
    }
    if target.n != ld.n || target.h != ld.h || target.w != ld.w {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            detail: format!("target {}x{}x{} does not match logits {ld}", target.n, target.h, target.w),
        });
    }
    let plane = ld.plane();
    let count = ld.n * plane;
    let inv = E::one() / E::from_f(count as f64);
    let x = logits.data();
    // probs[2*i] is P(class 0) for pixel i, probs[2*i+1] is P(class 1)
    let mut probs = vec![E::zero(); 2 * count];
    let mut loss = E::zero();
    for b in 0..ld.n {
        let base0 = ld.at(b, 0, 0, 0);
        let base1 = ld.at(b, 1, 0, 0);
        for p in 0..plane {
            let (l0, l1) = (x[base0 + p], x[base1 + p]);
            let m = l0.max(l1);
            let (z0, z1) = ((l0 - m).exp(), (l1 - m).exp());
            let s = z0 + z1;
            let i = b * plane + p;
            probs[2 * i] = z0 / s;
            probs[2 * i + 1] = z1 / s;
            let picked = if target.data()[i] == 0 { l0 } else { l1 };
            loss = loss - (picked - m - s.ln());
        }
    }
    loss = loss * inv;

    let od = Dims::new(1, 1, 1, 1);
    let record: Option<BackwardFn<E>> = if tape.is_recording() && logits.node().is_some() {
        let xn = logits.node().unwrap();
        let targets = target.data().to_vec();
        Some(Box::new(move |g: &[E]| {
            let scale = g[0] * inv;
            let mut dl = vec![E::zero(); ld.count()];
            for b in 0..ld.n {
                let base0 = ld.at(b, 0, 0, 0);
                let base1 = ld.at(b, 1, 0, 0);
                for p in 0..plane {
                    let i = b * plane + p;
                    let t = targets[i];
                    let one0 = if t == 0 { E::one() } else { E::zero() };
                    dl[base0 + p] = (probs[2 * i] - one0) * scale;
                    dl[base1 + p] = (probs[2 * i + 1] - (E::one() - one0)) * scale;
                }
            }
            vec![(xn, dl)]
        }))
    } else {
        None
    };
    tape.finish("softmax_cross_entropy", od, Arc::new(vec![loss]), record)
}

/// Per-pixel hard decision: 1 where the change logit exceeds the no-change
/// logit, 0 otherwise (ties count as unchanged). Not differentiable.
pub fn argmax_change<E: Elem>(logits: &Tensor<E>) -> Result<LabelMap> {
    let ld = logits.dims();
    if ld.c != 2 {
        return Err(Error::Shape {
            op: "argmax_change",
            detail: format!("logits must have 2 channels, got {}", ld.c),
        });
    }
    let plane = ld.plane();
    let x = logits.data();
    let mut out = vec![0u8; ld.n * plane];
    for b in 0..ld.n {
        let base0 = ld.at(b, 0, 0, 0);
        let base1 = ld.at(b, 1, 0, 0);
        for p in 0..plane {
            if x[base1 + p] > x[base0 + p] {
                out[b * plane + p] = 1;
            }
        }
    }
    LabelMap::new(ld.n, ld.h, ld.w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FiniteDiffConfig, Parameter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: Dims) -> Tensor<f64> {
        let data = (0..dims.count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(dims, data).unwrap()
    }

    fn tensor4(dims: Dims, data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    /// Direct six-nested-loop convolution, independent of the kernel above.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (xd, wd) = (x.dims(), w.dims());
        let oh = (xd.h + 2 * pad - wd.h) / stride + 1;
        let ow = (xd.w + 2 * pad - wd.w) / stride + 1;
        let od = Dims::new(xd.n, wd.n, oh, ow);
        let mut out = vec![0.0; od.count()];
        for b in 0..xd.n {
            for oc in 0..wd.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..xd.c {
                            for ky in 0..wd.h {
                                for kx in 0..wd.w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && (iy as usize) < xd.h && ix >= 0 && (ix as usize) < xd.w {
                                        acc += x.data()[xd.at(b, ic, iy as usize, ix as usize)]
                                            * w.data()[wd.at(oc, ic, ky, kx)];
                                    }
                                }
                            }
                        }
                        out[od.at(b, oc, oy, ox)] = acc;
                    }
                }
            }
        }
        Tensor::new(od, out).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "mismatch at {i}: {x} vs {y}"
            );
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv2d_scalar_scaling() {
        let mut tape = Tape::inference();
        let x = Tensor::full(Dims::new(1, 1, 3, 3), 1.0f64);
        let w = tensor4(Dims::new(1, 1, 1, 1), &[2.0]);
        let y = conv2d(&mut tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::inference();
        let x = rand_tensor(&mut rng, Dims::new(1, 1, 5, 5));
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = tensor4(Dims::new(1, 1, 3, 3), &w);
        let y = conv2d(&mut tape, &x, &w, None, 1, 1).unwrap();
        assert_close(y.data(), x.data(), 0.0);
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::inference();
        let x = rand_tensor(&mut rng, Dims::new(2, 3, 6, 6));
        let w = rand_tensor(&mut rng, Dims::new(4, 3, 3, 3));
        let y = conv2d(&mut tape, &x, &w, None, 2, 1).unwrap();
        let expect = conv_oracle(&x, &w, 2, 1);
        assert_eq!(y.dims(), expect.dims());
        assert_close(y.data(), expect.data(), 1e-12);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_bad_dims() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::zeros(Dims::new(1, 2, 4, 4));
        let w = Tensor::zeros(Dims::new(1, 3, 3, 3));
        assert!(matches!(conv2d(&mut tape, &x, &w, None, 1, 0), Err(Error::Shape { .. })));
        let w = Tensor::zeros(Dims::new(1, 2, 5, 5));
        assert!(matches!(conv2d(&mut tape, &x, &w, None, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_transpose2d_block_fill() {
        let mut tape = Tape::inference();
        let x = tensor4(Dims::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::full(Dims::new(1, 1, 2, 2), 1.0f64);
        let y = conv_transpose2d(&mut tape, &x, &w, 2).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 4, 4));
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_close(y.data(), &expect, 0.0);
    }

    #[test]
    fn conv_transpose2d_zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::inference();
        let x = Tensor::zeros(Dims::new(1, 3, 4, 4));
        let w = rand_tensor(&mut rng, Dims::new(3, 2, 2, 2));
        let y = conv_transpose2d(&mut tape, &x, &w, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose2d_is_adjoint_of_conv2d() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared weights, pad 0.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for &stride in &[1usize, 2] {
            let mut tape = Tape::inference();
            let x = rand_tensor(&mut rng, Dims::new(2, 3, 7, 7));
            let w = rand_tensor(&mut rng, Dims::new(4, 3, 3, 3));
            let cx = conv2d(&mut tape, &x, &w, None, stride, 0).unwrap();
            let y = rand_tensor(&mut rng, cx.dims());
            // conv_transpose wants weight as (c_in=4, c_out=3, k, k)
            let wd = w.dims();
            let mut wt = vec![0.0; wd.count()];
            let td = Dims::new(wd.n, wd.c, wd.h, wd.w);
            for oc in 0..wd.n {
                for ic in 0..wd.c {
                    for ky in 0..wd.h {
                        for kx in 0..wd.w {
                            wt[td.at(oc, ic, ky, kx)] = w.data()[wd.at(oc, ic, ky, kx)];
                        }
                    }
                }
            }
            let wt = Tensor::new(td, wt).unwrap();
            let ty = conv_transpose2d(&mut tape, &y, &wt, stride).unwrap();
            // Output of the transpose covers (in-1)*s + k which can exceed x
            // when stride > 1; the adjoint identity holds on the overlap
            // because conv never reads the trailing rows.
            let lhs = dot(cx.data(), y.data());
            let xd = x.dims();
            let tyd = ty.dims();
            let mut rhs = 0.0;
            for b in 0..xd.n {
                for c in 0..xd.c {
                    for yy in 0..xd.h {
                        for xx in 0..xd.w {
                            rhs += x.data()[xd.at(b, c, yy, xx)] * ty.data()[tyd.at(b, c, yy, xx)];
                        }
                    }
                }
            }
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "stride {stride}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn maxpool_and_avgpool_trivial_window() {
        let mut tape = Tape::inference();
        let x = tensor4(Dims::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let mx = maxpool2d(&mut tape, &x, 2, 2, 0).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        let av = avgpool2d(&mut tape, &x, 2, 2, 0).unwrap();
        assert_eq!(av.data(), &[2.5]);
    }

    #[test]
    fn pools_match_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::inference();
        let x = rand_tensor(&mut rng, Dims::new(1, 2, 6, 6));
        let xd = x.dims();
        let (k, s, p) = (3usize, 1usize, 1usize);
        let mx = maxpool2d(&mut tape, &x, k, s, p).unwrap();
        let av = avgpool2d(&mut tape, &x, k, s, p).unwrap();
        let od = mx.dims();
        assert_eq!(od, Dims::new(1, 2, 6, 6));
        for b in 0..od.n {
            for c in 0..od.c {
                for oy in 0..od.h {
                    for ox in 0..od.w {
                        let mut best = f64::NEG_INFINITY;
                        let mut sum = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && (iy as usize) < xd.h && ix >= 0 && (ix as usize) < xd.w {
                                    let v = x.data()[xd.at(b, c, iy as usize, ix as usize)];
                                    best = best.max(v);
                                    sum += v;
                                }
                            }
                        }
                        assert_eq!(mx.data()[od.at(b, c, oy, ox)], best);
                        let got = av.data()[od.at(b, c, oy, ox)];
                        assert!((got - sum / (k * k) as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_reductions_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut tape = Tape::inference();
        let x = rand_tensor(&mut rng, Dims::new(2, 5, 4, 4));
        let xd = x.dims();
        let mx = channel_reduce_max(&mut tape, &x).unwrap();
        let mn = channel_reduce_mean(&mut tape, &x).unwrap();
        for b in 0..xd.n {
            for y in 0..xd.h {
                for xx in 0..xd.w {
                    let vals: Vec<f64> = (0..xd.c).map(|c| x.data()[xd.at(b, c, y, xx)]).collect();
                    let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mean = vals.iter().sum::<f64>() / xd.c as f64;
                    let o = mx.dims().at(b, 0, y, xx);
                    assert_eq!(mx.data()[o], best);
                    assert!((mn.data()[o] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_reductions_trivial_cases() {
        let mut tape = Tape::inference();
        // duplicate channels: both reductions return the channel
        let x = tensor4(Dims::new(1, 2, 1, 2), &[5.0, -1.0, 5.0, -1.0]);
        let mx = channel_reduce_max(&mut tape, &x).unwrap();
        let mn = channel_reduce_mean(&mut tape, &x).unwrap();
        assert_eq!(mx.data(), &[5.0, -1.0]);
        assert_eq!(mn.data(), &[5.0, -1.0]);
        // channels [1, 3] at a pixel: max 3, mean 2
        let x = tensor4(Dims::new(1, 2, 1, 1), &[1.0, 3.0]);
        assert_eq!(channel_reduce_max(&mut tape, &x).unwrap().data(), &[3.0]);
        assert_eq!(channel_reduce_mean(&mut tape, &x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn concat_channels_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::inference();
        let (h, w) = (3, 2);
        let a = rand_tensor(&mut rng, Dims::new(1, 2, h, w));
        let b = rand_tensor(&mut rng, Dims::new(1, 1, h, w));
        let c = rand_tensor(&mut rng, Dims::new(1, 1, h, w));
        let cat = concat_channels(&mut tape, &[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(cat.dims(), Dims::new(1, 4, h, w));
        assert_eq!(&cat.data()[0..2 * h * w], a.data());
        assert_eq!(&cat.data()[2 * h * w..3 * h * w], b.data());

        let single = concat_channels(&mut tape, &[a.clone()]).unwrap();
        assert_eq!(single.data(), a.data());

        let bad = rand_tensor(&mut rng, Dims::new(1, 1, h + 1, w));
        assert!(concat_channels(&mut tape, &[a, bad]).is_err());
    }

    #[test]
    fn activations_trivial_values() {
        let mut tape = Tape::inference();
        let x = tensor4(Dims::new(1, 1, 1, 4), &[0.0, -3.0, 2.0, 8.0]);
        let s = sigmoid(&mut tape, &x).unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let r = relu(&mut tape, &x).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0, 8.0]);
        let r6 = relu6(&mut tape, &x).unwrap();
        assert_eq!(r6.data(), &[0.0, 0.0, 2.0, 6.0]);
    }

    #[test]
    fn linear_identity_zero_and_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut tape = Tape::inference();

        let x = rand_tensor(&mut rng, Dims::new(2, 3, 1, 1));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let eye = tensor4(Dims::new(3, 3, 1, 1), &eye);
        let y = linear(&mut tape, &x, &eye, None).unwrap();
        assert_close(y.data(), x.data(), 0.0);

        let zero_w = Tensor::zeros(Dims::new(2, 3, 1, 1));
        let bias = tensor4(Dims::new(1, 2, 1, 1), &[0.5, -1.5]);
        let y = linear(&mut tape, &x, &zero_w, Some(&bias)).unwrap();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5]);

        // random 3x8 against a naive triple loop
        let x = rand_tensor(&mut rng, Dims::new(3, 8, 1, 1));
        let w = rand_tensor(&mut rng, Dims::new(5, 8, 1, 1));
        let b = rand_tensor(&mut rng, Dims::new(1, 5, 1, 1));
        let y = linear(&mut tape, &x, &w, Some(&b)).unwrap();
        for r in 0..3 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for i in 0..8 {
                    acc += x.data()[r * 8 + i] * w.data()[o * 8 + i];
                }
                assert!((y.data()[r * 5 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::inference();
        let logits = Tensor::<f64>::zeros(Dims::new(1, 2, 2, 2));
        let target = LabelMap::new(1, 2, 2, vec![0, 1, 0, 1]).unwrap();
        let loss = softmax_cross_entropy(&mut tape, &logits, &target).unwrap();
        assert!((loss.scalar().unwrap() - (2.0f64).ln()).abs() < 1e-12);

        // +50 margin on the correct class saturates to ~zero loss
        let mut data = vec![0.0; 8];
        let ld = Dims::new(1, 2, 2, 2);
        for (i, &t) in target.data().iter().enumerate() {
            let (y, x) = (i / 2, i % 2);
            data[ld.at(0, t as usize, y, x)] = 50.0;
        }
        let logits = tensor4(ld, &data);
        let loss = softmax_cross_entropy(&mut tape, &logits, &target).unwrap();
        assert!(loss.scalar().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ld = Dims::new(2, 2, 3, 3);
        let logits0 = rand_tensor(&mut rng, ld);
        let labels: Vec<u8> = (0..2 * 9).map(|_| rng.gen_range(0..=1)).collect();
        let target = LabelMap::new(2, 3, 3, labels).unwrap();

        let mut tape = Tape::inference();
        let loss = softmax_cross_entropy(&mut tape, &logits0, &target).unwrap();

        // per-pixel softmax + log oracle
        let mut expect = 0.0;
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let l0 = logits0.data()[ld.at(b, 0, y, x)];
                    let l1 = logits0.data()[ld.at(b, 1, y, x)];
                    let p = if target.at(b, y, x) == 0 {
                        l0.exp() / (l0.exp() + l1.exp())
                    } else {
                        l1.exp() / (l0.exp() + l1.exp())
                    };
                    expect -= p.ln();
                }
            }
        }
        expect /= 18.0;
        assert!((loss.scalar().unwrap() - expect).abs() < 1e-12);

        // gradient against central differences
        let p = Parameter::new(logits0);
        let report = finite_diff_check(
            &[("logits".into(), p.clone())],
            |tape| {
                let x = tape.watch(&p);
                softmax_cross_entropy(tape, &x, &target)
            },
            &FiniteDiffConfig::default(),
        )
        .unwrap();
        assert!(report[0].1 < 1e-4, "rel err {}", report[0].1);
    }

    #[test]
    fn backward_sum_gives_ones_and_unreachable_gives_zeros() {
        let mut tape = Tape::recording();
        let p = Parameter::new(Tensor::full(Dims::new(1, 2, 2, 2), 3.0f64));
        let q = Parameter::new(Tensor::full(Dims::new(1, 1, 1, 1), 1.0f64));
        let x = tape.watch(&p);
        let _unused = tape.watch(&q);
        let loss = sum_all(&mut tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(p.grad().iter().all(|&g| g == 1.0));
        assert!(q.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::recording();
        let p = Parameter::new(Tensor::full(Dims::new(1, 1, 1, 1), 2.0f64));
        let x = tape.watch(&p);
        let loss = sum_all(&mut tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn gradient_accumulates_across_two_uses() {
        // loss = sum(x * x) via two watches of the same parameter: the grad
        // must be the sum of both path gradients (2x), matching the
        // single-path baseline computed by hand.
        let mut tape = Tape::recording();
        let p = Parameter::new(tensor4(Dims::new(1, 1, 1, 3), &[1.0, -2.0, 0.5]));
        let a = tape.watch(&p);
        let b = tape.watch(&p);
        let prod = mul(&mut tape, &a, &b).unwrap();
        let loss = sum_all(&mut tape, &prod).unwrap();
        tape.backward(&loss).unwrap();
        assert_close(&p.grad(), &[2.0, -4.0, 1.0], 0.0);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let p = Parameter::new(Tensor::full(Dims::new(1, 1, 1, 1), 2.0f64));
        let x = tape.watch(&p);
        let y = sum_all(&mut tape, &x).unwrap();
        assert!(x.node().is_none() && y.node().is_none());
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn checked_mode_surfaces_non_finite_values() {
        let mut tape = Tape::inference().checked();
        let x = tensor4(Dims::new(1, 1, 1, 1), &[800.0]);
        // exp(800) overflows: sigmoid is stable, so drive a raw mul overflow
        let big = tensor4(Dims::new(1, 1, 1, 1), &[f64::MAX]);
        let r = mul(&mut tape, &x, &big);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn elementwise_activation_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x0 = rand_tensor(&mut rng, Dims::new(1, 2, 3, 3));
        // keep relu inputs away from the kink
        let x0 = Tensor::new(
            x0.dims(),
            x0.data().iter().map(|&v| if v.abs() < 0.1 { v + 0.2 } else { v }).collect(),
        )
        .unwrap();
        let proj = rand_tensor(&mut rng, x0.dims());

        for (name, f) in [
            ("sigmoid", sigmoid as fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>),
            ("relu", relu),
            ("relu6", relu6),
            ("one_minus", one_minus),
        ] {
            let p = Parameter::new(x0.clone());
            let proj = proj.clone();
            let report = finite_diff_check(
                &[(name.into(), p.clone())],
                |tape| {
                    let x = tape.watch(&p);
                    let y = f(tape, &x)?;
                    let weighted = mul(tape, &y, &proj)?;
                    sum_all(tape, &weighted)
                },
                &FiniteDiffConfig::default(),
            )
            .unwrap();
            assert!(report[0].1 < 1e-7, "{name} rel err {}", report[0].1);
        }
    }

    #[test]
    fn structural_op_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let step = FiniteDiffConfig::default();

        // conv2d w.r.t. input, weight, bias
        let x = Parameter::new(rand_tensor(&mut rng, Dims::new(1, 2, 4, 4)));
        let w = Parameter::new(rand_tensor(&mut rng, Dims::new(3, 2, 3, 3)));
        let b = Parameter::new(rand_tensor(&mut rng, Dims::new(1, 3, 1, 1)));
        let proj = rand_tensor(&mut rng, Dims::new(1, 3, 4, 4));
        let report = finite_diff_check(
            &[("x".into(), x.clone()), ("w".into(), w.clone()), ("b".into(), b.clone())],
            |tape| {
                let xt = tape.watch(&x);
                let wt = tape.watch(&w);
                let bt = tape.watch(&b);
                let y = conv2d(tape, &xt, &wt, Some(&bt), 1, 1)?;
                let weighted = mul(tape, &y, &proj)?;
                sum_all(tape, &weighted)
            },
            &step,
        )
        .unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-6, "conv2d {name} rel err {err}");
        }

        // conv_transpose2d
        let x = Parameter::new(rand_tensor(&mut rng, Dims::new(1, 3, 3, 3)));
        let w = Parameter::new(rand_tensor(&mut rng, Dims::new(3, 2, 2, 2)));
        let proj = rand_tensor(&mut rng, Dims::new(1, 2, 6, 6));
        let report = finite_diff_check(
            &[("x".into(), x.clone()), ("w".into(), w.clone())],
            |tape| {
                let xt = tape.watch(&x);
                let wt = tape.watch(&w);
                let y = conv_transpose2d(tape, &xt, &wt, 2)?;
                let weighted = mul(tape, &y, &proj)?;
                sum_all(tape, &weighted)
            },
            &step,
        )
        .unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-6, "conv_transpose2d {name} rel err {err}");
        }

        // pooling, reductions, concat: single input each
        type OpFn = fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;
        let cases: Vec<(&str, OpFn)> = vec![
            ("maxpool", |t, x| maxpool2d(t, x, 2, 2, 0)),
            ("avgpool", |t, x| avgpool2d(t, x, 3, 1, 1)),
            ("global_avg", global_avg_pool),
            ("global_max", global_max_pool),
            ("chan_max", channel_reduce_max),
            ("chan_mean", channel_reduce_mean),
        ];
        for (name, f) in cases {
            let x = Parameter::new(rand_tensor(&mut rng, Dims::new(2, 3, 4, 4)));
            let report = finite_diff_check(
                &[((*name).into(), x.clone())],
                |tape| {
                    let xt = tape.watch(&x);
                    let y = f(tape, &xt)?;
                    let proj = Tensor::new(
                        y.dims(),
                        (0..y.dims().count()).map(|i| ((i % 7) as f64) / 3.0 - 1.0).collect(),
                    )
                    .unwrap();
                    let weighted = mul(tape, &y, &proj)?;
                    sum_all(tape, &weighted)
                },
                &step,
            )
            .unwrap();
            assert!(report[0].1 < 1e-6, "{name} rel err {}", report[0].1);
        }

        // concat backward splits the upstream gradient into channel slices
        let a = Parameter::new(rand_tensor(&mut rng, Dims::new(1, 2, 3, 3)));
        let c = Parameter::new(rand_tensor(&mut rng, Dims::new(1, 1, 3, 3)));
        let proj = rand_tensor(&mut rng, Dims::new(1, 3, 3, 3));
        let report = finite_diff_check(
            &[("a".into(), a.clone()), ("c".into(), c.clone())],
            |tape| {
                let at = tape.watch(&a);
                let ct = tape.watch(&c);
                let y = concat_channels(tape, &[at, ct])?;
                let weighted = mul(tape, &y, &proj)?;
                sum_all(tape, &weighted)
            },
            &step,
        )
        .unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-8, "concat {name} rel err {err}");
        }

        // linear
        let x = Parameter::new(rand_tensor(&mut rng, Dims::new(3, 8, 1, 1)));
        let w = Parameter::new(rand_tensor(&mut rng, Dims::new(4, 8, 1, 1)));
        let b = Parameter::new(rand_tensor(&mut rng, Dims::new(1, 4, 1, 1)));
        let proj = rand_tensor(&mut rng, Dims::new(3, 4, 1, 1));
        let report = finite_diff_check(
            &[("x".into(), x.clone()), ("w".into(), w.clone()), ("b".into(), b.clone())],
            |tape| {
                let xt = tape.watch(&x);
                let wt = tape.watch(&w);
                let bt = tape.watch(&b);
                let y = linear(tape, &xt, &wt, Some(&bt))?;
                let weighted = mul(tape, &y, &proj)?;
                sum_all(tape, &weighted)
            },
            &step,
        )
        .unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-7, "linear {name} rel err {err}");
        }

        // scale_channels / scale_spatial / add / mul
        let x = Parameter::new(rand_tensor(&mut rng, Dims::new(2, 3, 3, 3)));
        let gate = Parameter::new(rand_tensor(&mut rng, Dims::new(2, 3, 1, 1)));
        let report = finite_diff_check(
            &[("x".into(), x.clone()), ("gate".into(), gate.clone())],
            |tape| {
                let xt = tape.watch(&x);
                let gt = tape.watch(&gate);
                let y = scale_channels(tape, &xt, &gt)?;
                sum_all(tape, &y)
            },
            &step,
        )
        .unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-7, "scale_channels {name} rel err {err}");
        }

        let x = Parameter::new(rand_tensor(&mut rng, Dims::new(2, 3, 3, 3)));
        let gate = Parameter::new(rand_tensor(&mut rng, Dims::new(2, 1, 3, 3)));
        let report = finite_diff_check(
            &[("x".into(), x.clone()), ("gate".into(), gate.clone())],
            |tape| {
                let xt = tape.watch(&x);
                let gt = tape.watch(&gate);
                let y = scale_spatial(tape, &xt, &gt)?;
                sum_all(tape, &y)
            },
            &step,
        )
        .unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-7, "scale_spatial {name} rel err {err}");
        }
    }

    #[test]
    fn deterministic_op_sequence_is_bitwise_stable() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::recording();
            let p = Parameter::new(rand_tensor(&mut rng, Dims::new(2, 3, 8, 8)));
            let w = Parameter::new(rand_tensor(&mut rng, Dims::new(4, 3, 3, 3)));
            let x = tape.watch(&p);
            let wt = tape.watch(&w);
            let y = conv2d(&mut tape, &x, &wt, None, 1, 1).unwrap();
            let y = relu(&mut tape, &y).unwrap();
            let loss = sum_all(&mut tape, &y).unwrap();
            tape.backward(&loss).unwrap();
            (loss.scalar().unwrap().to_bits(), p.grad().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
