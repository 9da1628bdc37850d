//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes the forward value, and registers a
//! gradient closure. Broadcasting is deliberately restricted: binary ops
//! accept equal shapes or a scalar (one-element tensor) on either side, and
//! nothing else — all other mismatches are hard errors.
//!
//! matmul and conv2d are backed by a blocked gemm kernel (`matrixmultiply`);
//! conv2d lowers to im2col + gemm in both directions. The naive-loop
//! reference implementations live in the test suites, not here.

use super::{Element, Tensor};
use crate::error::{Error, Result};

fn shape_err<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.numel() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.numel() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(shape_err(op, a, b))
    }
}

fn sum_of<E: Element>(xs: &[E]) -> E {
    xs.iter().fold(E::zero(), |acc, v| acc + *v)
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $bwd_a:expr, $bwd_b:expr) => {
        pub fn $name<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
            let bc = broadcast($opname, a, b)?;
            let (ad, bd) = (a.data(), b.data());
            let fwd = $fwd;
            let data: Vec<E> = match bc {
                Broadcast::Same => ad.iter().zip(bd.iter()).map(|(x, y)| fwd(*x, *y)).collect(),
                Broadcast::LeftScalar => bd.iter().map(|y| fwd(ad[0], *y)).collect(),
                Broadcast::RightScalar => ad.iter().map(|x| fwd(*x, bd[0])).collect(),
            };
            let shape = match bc {
                Broadcast::LeftScalar => b.shape().to_vec(),
                _ => a.shape().to_vec(),
            };
            drop(ad);
            drop(bd);
            let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let ad = pa.data();
                let bd = pb.data();
                let bwd_a = $bwd_a;
                let bwd_b = $bwd_b;
                let a_scalar = pa.numel() == 1;
                let b_scalar = pb.numel() == 1;
                if pa.requires_grad() {
                    let mut da = vec![E::zero(); pa.numel()];
                    for (i, gi) in g.iter().enumerate() {
                        let x = ad[if a_scalar { 0 } else { i }];
                        let y = bd[if b_scalar { 0 } else { i }];
                        let idx = if a_scalar { 0 } else { i };
                        da[idx] = da[idx] + bwd_a(*gi, x, y);
                    }
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let mut db = vec![E::zero(); pb.numel()];
                    for (i, gi) in g.iter().enumerate() {
                        let x = ad[if a_scalar { 0 } else { i }];
                        let y = bd[if b_scalar { 0 } else { i }];
                        let idx = if b_scalar { 0 } else { i };
                        db[idx] = db[idx] + bwd_b(*gi, x, y);
                    }
                    pb.accumulate_grad(&db);
                }
            };
            Ok(Tensor::from_op(
                $opname,
                shape,
                data,
                vec![a.clone(), b.clone()],
                Box::new(back),
            ))
        }
    };
}

binary_op!(
    add,
    "add",
    |x: E, y: E| x + y,
    |g: E, _x: E, _y: E| g,
    |g: E, _x: E, _y: E| g
);
binary_op!(
    sub,
    "sub",
    |x: E, y: E| x - y,
    |g: E, _x: E, _y: E| g,
    |g: E, _x: E, _y: E| -g
);
binary_op!(
    mul,
    "mul",
    |x: E, y: E| x * y,
    |g: E, _x: E, y: E| g * y,
    |g: E, x: E, _y: E| g * x
);
binary_op!(
    div,
    "div",
    |x: E, y: E| x / y,
    |g: E, _x: E, y: E| g / y,
    |g: E, x: E, y: E| -g * x / (y * y)
);

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

/// Multiplies by a compile-time constant (no gradient into the constant).
pub fn scale<E: Element>(x: &Tensor<E>, k: f64) -> Tensor<E> {
    let ke = E::from_f64(k);
    let data: Vec<E> = x.data().iter().map(|v| *v * ke).collect();
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            let da: Vec<E> = g.iter().map(|gi| *gi * ke).collect();
            parents[0].accumulate_grad(&da);
        }
    };
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(back),
    )
}

/// Adds a constant to every element.
pub fn add_scalar<E: Element>(x: &Tensor<E>, k: f64) -> Tensor<E> {
    let ke = E::from_f64(k);
    let data: Vec<E> = x.data().iter().map(|v| *v + ke).collect();
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            parents[0].accumulate_grad(g);
        }
    };
    Tensor::from_op(
        "add_scalar",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(back),
    )
}

macro_rules! unary_op {
    ($name:ident, $opname:literal, $fwd:expr, $bwd:expr) => {
        pub fn $name<E: Element>(x: &Tensor<E>) -> Tensor<E> {
            let fwd = $fwd;
            let data: Vec<E> = x.data().iter().map(|v| fwd(*v)).collect();
            let back = move |out: &[E], g: &[E], parents: &[Tensor<E>]| {
                if parents[0].requires_grad() {
                    let xd = parents[0].data();
                    let bwd = $bwd;
                    let da: Vec<E> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| bwd(*gi, xd[i], out[i]))
                        .collect();
                    drop(xd);
                    parents[0].accumulate_grad(&da);
                }
            };
            Tensor::from_op(
                $opname,
                x.shape().to_vec(),
                data,
                vec![x.clone()],
                Box::new(back),
            )
        }
    };
}

unary_op!(tanh, "tanh", |v: E| v.tanh(), |g: E, _x: E, y: E| g
    * (E::one() - y * y));
unary_op!(abs, "abs", |v: E| v.abs(), |g: E, x: E, _y: E| {
    if x > E::zero() {
        g
    } else if x < E::zero() {
        -g
    } else {
        E::zero()
    }
});
// Gradient 1/(2*sqrt(x)); callers must keep x strictly positive.
unary_op!(sqrt, "sqrt", |v: E| v.sqrt(), |g: E, _x: E, y: E| g
    / (E::from_f64(2.0) * y));

/// Leaky ReLU; the subgradient at exactly 0 is `slope` (0 for plain ReLU,
/// matching the hinge convention that max(0, .) has zero slope at the kink).
pub fn leaky_relu<E: Element>(x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let s = E::from_f64(slope);
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|v| if *v > E::zero() { *v } else { *v * s })
        .collect();
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            let xd = parents[0].data();
            let da: Vec<E> = g
                .iter()
                .zip(xd.iter())
                .map(|(gi, xi)| if *xi > E::zero() { *gi } else { *gi * s })
                .collect();
            drop(xd);
            parents[0].accumulate_grad(&da);
        }
    };
    Tensor::from_op(
        "leaky_relu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(back),
    )
}

/// max(0, x).
pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    leaky_relu(x, 0.0)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Sum of all elements, as a rank-0 tensor.
pub fn reduce_sum<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let total = sum_of(&x.data());
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            let da = vec![g[0]; parents[0].numel()];
            parents[0].accumulate_grad(&da);
        }
    };
    Tensor::from_op(
        "reduce_sum",
        vec![],
        vec![total],
        vec![x.clone()],
        Box::new(back),
    )
}

/// Mean of all elements, as a rank-0 tensor.
pub fn reduce_mean<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let n = x.numel();
    let inv = E::from_f64(1.0 / n as f64);
    let total = sum_of(&x.data()) * inv;
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            let da = vec![g[0] * inv; parents[0].numel()];
            parents[0].accumulate_grad(&da);
        }
    };
    Tensor::from_op(
        "reduce_mean",
        vec![],
        vec![total],
        vec![x.clone()],
        Box::new(back),
    )
}

/// Per-channel spatial mean: `[c,h,w] -> [c]`.
pub fn spatial_mean<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "spatial_mean",
            shape: shape.to_vec(),
            expected: "[c,h,w]".into(),
        });
    }
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let inv = E::from_f64(1.0 / n as f64);
    let xd = x.data();
    let data: Vec<E> = (0..c)
        .map(|ch| sum_of(&xd[ch * n..(ch + 1) * n]) * inv)
        .collect();
    drop(xd);
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            let mut da = vec![E::zero(); c * n];
            for ch in 0..c {
                let gi = g[ch] * inv;
                for v in &mut da[ch * n..(ch + 1) * n] {
                    *v = gi;
                }
            }
            parents[0].accumulate_grad(&da);
        }
    };
    Ok(Tensor::from_op(
        "spatial_mean",
        vec![c],
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

pub fn reshape<E: Element>(x: &Tensor<E>, new_shape: &[usize]) -> Result<Tensor<E>> {
    let n: usize = new_shape.iter().product();
    if n != x.numel() {
        return Err(Error::BadShape {
            op: "reshape",
            shape: x.shape().to_vec(),
            expected: format!("{new_shape:?} with equal element count"),
        });
    }
    let data = x.data().clone();
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            parents[0].accumulate_grad(g);
        }
    };
    Ok(Tensor::from_op(
        "reshape",
        new_shape.to_vec(),
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

/// 2-D transpose: `[r,c] -> [c,r]`.
pub fn transpose<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "transpose",
            shape: shape.to_vec(),
            expected: "[r,c]".into(),
        });
    }
    let (r, c) = (shape[0], shape[1]);
    let xd = x.data();
    let mut data = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = xd[i * c + j];
        }
    }
    drop(xd);
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            let mut da = vec![E::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[j * r + i];
                }
            }
            parents[0].accumulate_grad(&da);
        }
    };
    Ok(Tensor::from_op(
        "transpose",
        vec![c, r],
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

/// Concatenation along `axis`; all other dimensions must match.
pub fn concat<E: Element>(xs: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput { op: "concat" });
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(Error::BadShape {
            op: "concat",
            shape: xs[0].shape().to_vec(),
            expected: format!("axis {axis} < rank"),
        });
    }
    for x in &xs[1..] {
        if x.shape().len() != rank {
            return Err(shape_err("concat", &xs[0], x));
        }
        for (d, (a, b)) in xs[0].shape().iter().zip(x.shape().iter()).enumerate() {
            if d != axis && a != b {
                return Err(shape_err("concat", &xs[0], x));
            }
        }
    }
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut data = vec![E::zero(); total];
    let axis_total = out_shape[axis];
    let mut offset = 0usize;
    let mut part_info = Vec::with_capacity(xs.len());
    for x in xs {
        let ax = x.shape()[axis];
        let xd = x.data();
        for o in 0..outer {
            let src = &xd[o * ax * inner..(o + 1) * ax * inner];
            let dst = &mut data[(o * axis_total + offset) * inner..];
            dst[..ax * inner].copy_from_slice(src);
        }
        part_info.push((offset, ax));
        offset += ax;
    }
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        for (p, (off, ax)) in parents.iter().zip(part_info.iter()) {
            if !p.requires_grad() {
                continue;
            }
            let mut da = vec![E::zero(); p.numel()];
            for o in 0..outer {
                let src = &g[(o * axis_total + off) * inner..(o * axis_total + off + ax) * inner];
                da[o * ax * inner..(o + 1) * ax * inner].copy_from_slice(src);
            }
            p.accumulate_grad(&da);
        }
    };
    Ok(Tensor::from_op(
        "concat",
        out_shape,
        data,
        xs.to_vec(),
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// `a[m,k] * b[k,n] -> [m,n]`. Gradients: dA = dC*B^T, dB = A^T*dC.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut data = vec![E::zero(); m * n];
    E::gemm(
        m,
        k,
        n,
        &a.data(),
        k as isize,
        1,
        &b.data(),
        n as isize,
        1,
        &mut data,
        false,
    );
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        let (pa, pb) = (&parents[0], &parents[1]);
        if pa.requires_grad() {
            // dA[m,k] = g[m,n] * B^T[n,k]
            let bd = pb.data();
            let mut da = vec![E::zero(); m * k];
            E::gemm(
                m, n, k, g, n as isize, 1, &bd, 1, n as isize, &mut da, false,
            );
            drop(bd);
            pa.accumulate_grad(&da);
        }
        if pb.requires_grad() {
            // dB[k,n] = A^T[k,m] * g[m,n]
            let ad = pa.data();
            let mut db = vec![E::zero(); k * n];
            E::gemm(
                k, m, n, &ad, 1, k as isize, g, n as isize, 1, &mut db, false,
            );
            drop(ad);
            pb.accumulate_grad(&db);
        }
    };
    Ok(Tensor::from_op(
        "matmul",
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let n = oh * ow;
    let mut cols = vec![E::zero(); ci * kh * kw * n];
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    cols: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let n = oh * ow;
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let t = dst + ix as usize;
                            out[t] = out[t] + cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding:
/// `input[ci,h,w] * kernel[co,ci,kh,kw] -> [co,oh,ow]`,
/// `oh = (h + 2*pad - kh)/stride + 1` (floor), analogous for `ow`.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (si, sk) = (input.shape(), kernel.shape());
    if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
        return Err(shape_err("conv2d", input, kernel));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig {
            what: "conv2d stride must be >= 1".into(),
        });
    }
    let (ci, h, w) = (si[0], si[1], si[2]);
    let (co, kh, kw) = (sk[0], sk[2], sk[3]);
    let (oh, ow) = match (
        conv_out_dim(h, kh, stride, pad),
        conv_out_dim(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: si.to_vec(),
                expected: format!("spatial dims >= kernel {kh}x{kw} after padding {pad}"),
            })
        }
    };
    let kdim = ci * kh * kw;
    let n = oh * ow;
    let cols = im2col(&input.data(), ci, h, w, kh, kw, stride, pad, oh, ow);
    let mut data = vec![E::zero(); co * n];
    E::gemm(
        co,
        kdim,
        n,
        &kernel.data(),
        kdim as isize,
        1,
        &cols,
        n as isize,
        1,
        &mut data,
        false,
    );
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        let (px, pk) = (&parents[0], &parents[1]);
        if pk.requires_grad() {
            // dW[co,kdim] = g[co,n] * cols^T[n,kdim]
            let mut dw = vec![E::zero(); co * kdim];
            E::gemm(
                co, n, kdim, g, n as isize, 1, &cols, 1, n as isize, &mut dw, false,
            );
            pk.accumulate_grad(&dw);
        }
        if px.requires_grad() {
            // dcols[kdim,n] = W^T[kdim,co] * g[co,n], then scatter back.
            let kd = pk.data();
            let mut dcols = vec![E::zero(); kdim * n];
            E::gemm(
                kdim,
                co,
                n,
                &kd,
                1,
                kdim as isize,
                g,
                n as isize,
                1,
                &mut dcols,
                false,
            );
            drop(kd);
            let mut dx = vec![E::zero(); ci * h * w];
            col2im_add(&dcols, ci, h, w, kh, kw, stride, pad, oh, ow, &mut dx);
            px.accumulate_grad(&dx);
        }
    };
    Ok(Tensor::from_op(
        "conv2d",
        vec![co, oh, ow],
        data,
        vec![input.clone(), kernel.clone()],
        Box::new(back),
    ))
}

/// Adds a per-channel bias: `x[c,h,w] + b[c]`.
pub fn add_channel_bias<E: Element>(x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sx, sb) = (x.shape(), b.shape());
    if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
        return Err(shape_err("add_channel_bias", x, b));
    }
    let (c, n) = (sx[0], sx[1] * sx[2]);
    let xd = x.data();
    let bd = b.data();
    let mut data = vec![E::zero(); c * n];
    for ch in 0..c {
        for i in 0..n {
            data[ch * n + i] = xd[ch * n + i] + bd[ch];
        }
    }
    drop(xd);
    drop(bd);
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if parents[0].requires_grad() {
            parents[0].accumulate_grad(g);
        }
        if parents[1].requires_grad() {
            let db: Vec<E> = (0..c).map(|ch| sum_of(&g[ch * n..(ch + 1) * n])).collect();
            parents[1].accumulate_grad(&db);
        }
    };
    Ok(Tensor::from_op(
        "add_channel_bias",
        sx.to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Normalization and modulation
// ---------------------------------------------------------------------------

/// Instance normalization over each channel of `[c,h,w]`:
/// `(x - mean_c) / sqrt(var_c + eps)`, population variance.
pub fn instance_norm<E: Element>(x: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "instance_norm",
            shape: shape.to_vec(),
            expected: "[c,h,w]".into(),
        });
    }
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let inv_n = E::from_f64(1.0 / n as f64);
    let epse = E::from_f64(eps);
    let xd = x.data();
    let mut data = vec![E::zero(); c * n];
    let mut inv_std = vec![E::zero(); c];
    for ch in 0..c {
        let xs = &xd[ch * n..(ch + 1) * n];
        let mean = sum_of(xs) * inv_n;
        let var = xs
            .iter()
            .fold(E::zero(), |acc, v| acc + (*v - mean) * (*v - mean))
            * inv_n;
        let is = E::one() / (var + epse).sqrt();
        inv_std[ch] = is;
        for (o, v) in data[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
            *o = (*v - mean) * is;
        }
    }
    drop(xd);
    let back = move |out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if !parents[0].requires_grad() {
            return;
        }
        let mut dx = vec![E::zero(); c * n];
        for ch in 0..c {
            let ys = &out[ch * n..(ch + 1) * n];
            let gs = &g[ch * n..(ch + 1) * n];
            let g_mean = sum_of(gs) * inv_n;
            let gy_mean = gs
                .iter()
                .zip(ys)
                .fold(E::zero(), |acc, (gi, yi)| acc + *gi * *yi)
                * inv_n;
            let is = inv_std[ch];
            for ((d, gi), yi) in dx[ch * n..(ch + 1) * n].iter_mut().zip(gs).zip(ys) {
                *d = is * (*gi - g_mean - *yi * gy_mean);
            }
        }
        parents[0].accumulate_grad(&dx);
    };
    Ok(Tensor::from_op(
        "instance_norm",
        shape.to_vec(),
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

/// Per-channel affine modulation: `out[c] = scale[c] * x[c] + shift[c]`.
pub fn channel_affine<E: Element>(
    x: &Tensor<E>,
    scale_v: &Tensor<E>,
    shift_v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let sx = x.shape();
    if sx.len() != 3 {
        return Err(Error::BadShape {
            op: "channel_affine",
            shape: sx.to_vec(),
            expected: "[c,h,w]".into(),
        });
    }
    let (c, n) = (sx[0], sx[1] * sx[2]);
    if scale_v.shape() != [c] {
        return Err(shape_err("channel_affine", x, scale_v));
    }
    if shift_v.shape() != [c] {
        return Err(shape_err("channel_affine", x, shift_v));
    }
    let xd = x.data();
    let sd = scale_v.data();
    let td = shift_v.data();
    let mut data = vec![E::zero(); c * n];
    for ch in 0..c {
        for i in 0..n {
            data[ch * n + i] = sd[ch] * xd[ch * n + i] + td[ch];
        }
    }
    drop(xd);
    drop(sd);
    drop(td);
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        let (px, ps, pt) = (&parents[0], &parents[1], &parents[2]);
        if px.requires_grad() {
            let sd = ps.data();
            let mut dx = vec![E::zero(); c * n];
            for ch in 0..c {
                for i in 0..n {
                    dx[ch * n + i] = g[ch * n + i] * sd[ch];
                }
            }
            drop(sd);
            px.accumulate_grad(&dx);
        }
        if ps.requires_grad() {
            let xd = px.data();
            let ds: Vec<E> = (0..c)
                .map(|ch| {
                    g[ch * n..(ch + 1) * n]
                        .iter()
                        .zip(&xd[ch * n..(ch + 1) * n])
                        .fold(E::zero(), |acc, (gi, xi)| acc + *gi * *xi)
                })
                .collect();
            drop(xd);
            ps.accumulate_grad(&ds);
        }
        if pt.requires_grad() {
            let dt: Vec<E> = (0..c).map(|ch| sum_of(&g[ch * n..(ch + 1) * n])).collect();
            pt.accumulate_grad(&dt);
        }
    };
    Ok(Tensor::from_op(
        "channel_affine",
        sx.to_vec(),
        data,
        vec![x.clone(), scale_v.clone(), shift_v.clone()],
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Nearest-neighbor upsampling of `[c,h,w]` by an integer factor.
pub fn upsample_nearest<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::BadShape {
            op: "upsample_nearest",
            shape: shape.to_vec(),
            expected: "[c,h,w]".into(),
        });
    }
    if factor == 0 {
        return Err(Error::InvalidConfig {
            what: "upsample factor must be >= 1".into(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut data = vec![E::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let sy = y / factor;
            let src = (ch * h + sy) * w;
            let dst = (ch * oh + y) * ow;
            for xo in 0..ow {
                data[dst + xo] = xd[src + xo / factor];
            }
        }
    }
    drop(xd);
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if !parents[0].requires_grad() {
            return;
        }
        let mut dx = vec![E::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..oh {
                let sy = y / factor;
                let dst = (ch * h + sy) * w;
                let src = (ch * oh + y) * ow;
                for xo in 0..ow {
                    let t = dst + xo / factor;
                    dx[t] = dx[t] + g[src + xo];
                }
            }
        }
        parents[0].accumulate_grad(&dx);
    };
    Ok(Tensor::from_op(
        "upsample_nearest",
        vec![c, oh, ow],
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

/// Average pooling of `[c,h,w]` with a `factor x factor` window and equal
/// stride; spatial dims must be divisible by the factor.
pub fn avg_pool2d<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 3 || factor == 0 || !shape[1].is_multiple_of(factor) || !shape[2].is_multiple_of(factor) {
        return Err(Error::BadShape {
            op: "avg_pool2d",
            shape: shape.to_vec(),
            expected: format!("[c,h,w] with h,w divisible by {factor}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / factor, w / factor);
    let inv = E::from_f64(1.0 / (factor * factor) as f64);
    let xd = x.data();
    let mut data = vec![E::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = E::zero();
                for dy in 0..factor {
                    let src = (ch * h + oy * factor + dy) * w + ox * factor;
                    for dx in 0..factor {
                        acc = acc + xd[src + dx];
                    }
                }
                data[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    drop(xd);
    let back = move |_out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if !parents[0].requires_grad() {
            return;
        }
        let mut dx = vec![E::zero(); c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gi = g[(ch * oh + oy) * ow + ox] * inv;
                    for dy in 0..factor {
                        let dst = (ch * h + oy * factor + dy) * w + ox * factor;
                        for dx_ in 0..factor {
                            dx[dst + dx_] = dx[dst + dx_] + gi;
                        }
                    }
                }
            }
        }
        parents[0].accumulate_grad(&dx);
    };
    Ok(Tensor::from_op(
        "avg_pool2d",
        vec![c, oh, ow],
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax of `[r,c]`, stabilized by per-row max subtraction.
pub fn softmax_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "softmax_rows",
            shape: shape.to_vec(),
            expected: "[r,c]".into(),
        });
    }
    let (r, c) = (shape[0], shape[1]);
    let xd = x.data();
    let mut data = vec![E::zero(); r * c];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let m = row.iter().fold(row[0], |a, v| if *v > a { *v } else { a });
        let mut s = E::zero();
        for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (*v - m).exp();
            s = s + *o;
        }
        let inv = E::one() / s;
        for o in &mut data[i * c..(i + 1) * c] {
            *o = *o * inv;
        }
    }
    drop(xd);
    let back = move |out: &[E], g: &[E], parents: &[Tensor<E>]| {
        if !parents[0].requires_grad() {
            return;
        }
        let mut dx = vec![E::zero(); r * c];
        for i in 0..r {
            let y = &out[i * c..(i + 1) * c];
            let gi = &g[i * c..(i + 1) * c];
            let dot = gi
                .iter()
                .zip(y)
                .fold(E::zero(), |acc, (a, b)| acc + *a * *b);
            for ((d, yj), gj) in dx[i * c..(i + 1) * c].iter_mut().zip(y).zip(gi) {
                *d = *yj * (*gj - dot);
            }
        }
        parents[0].accumulate_grad(&dx);
    };
    Ok(Tensor::from_op(
        "softmax_rows",
        shape.to_vec(),
        data,
        vec![x.clone()],
        Box::new(back),
    ))
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

/// Mean absolute difference between two same-shaped tensors.
pub fn l1_mean<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(shape_err("l1_mean", a, b));
    }
    Ok(reduce_mean(&abs(&sub(a, b)?)))
}

/// Cosine similarity of two 1-D vectors. Zero-norm inputs are an error, so
/// the result is always finite.
pub fn cosine_similarity<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 1 || a.shape() != b.shape() {
        return Err(shape_err("cosine_similarity", a, b));
    }
    for (name, t) in [("left", a), ("right", b)] {
        let sq: f64 = t.data().iter().map(|v| v.into_f64() * v.into_f64()).sum();
        if sq == 0.0 {
            return Err(Error::DegenerateInput {
                op: "cosine_similarity",
                detail: format!("{name} vector has zero norm"),
            });
        }
    }
    let dot = reduce_sum(&mul(a, b)?);
    let na2 = reduce_sum(&mul(a, a)?);
    let nb2 = reduce_sum(&mul(b, b)?);
    div(&dot, &sqrt(&mul(&na2, &nb2)?))
}

/// Scales a 1-D vector to unit L2 norm. Zero vectors are an error.
pub fn l2_normalize<E: Element>(v: &Tensor<E>) -> Result<Tensor<E>> {
    if v.shape().len() != 1 {
        return Err(Error::BadShape {
            op: "l2_normalize",
            shape: v.shape().to_vec(),
            expected: "[d]".into(),
        });
    }
    let sq: f64 = v.data().iter().map(|x| x.into_f64() * x.into_f64()).sum();
    if sq == 0.0 {
        return Err(Error::DegenerateInput {
            op: "l2_normalize",
            detail: "zero-norm vector".into(),
        });
    }
    div(v, &sqrt(&reduce_sum(&mul(v, v)?)))
}
