//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function over [`Tensor`]s; the tape records
//! which kernel produced a value and replays the matching `*_vjp` during
//! backward. Multiply-add counts for the matmul-class kernels (`linear`,
//! `bmm`, `conv2x2s2`) feed the FLOP meter so analytic FLOP reports can be
//! checked against instrumented execution exactly.

use std::cell::Cell;

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{EsdtError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

// --------------------------------------------------------------------------
// multiply-add meter
// --------------------------------------------------------------------------

thread_local! {
    static MA_METER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Start counting multiply-adds on this thread.
pub fn meter_start() {
    MA_METER.with(|m| m.set(Some(0)));
}

/// Stop counting and return the total recorded since `meter_start`.
pub fn meter_stop() -> u64 {
    MA_METER.with(|m| {
        let v = m.get().unwrap_or(0);
        m.set(None);
        v
    })
}

fn meter_add(n: u64) {
    MA_METER.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + n));
        }
    });
}

fn check_finite<F: Scalar>(op: &str, t: &Tensor<F>) {
    debug_assert!(t.all_finite(), "{op} produced a non-finite element");
    let _ = op;
}

// --------------------------------------------------------------------------
// elementwise
// --------------------------------------------------------------------------

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(EsdtError::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::new(a.shape(), data);
    check_finite("add", &out);
    Ok(out)
}

pub fn sub<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(EsdtError::shape(
            "sub",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::new(a.shape(), data))
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(EsdtError::shape(
            "mul",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::new(a.shape(), data);
    check_finite("mul", &out);
    Ok(out)
}

pub fn scale<F: Scalar>(a: &Tensor<F>, c: F) -> Tensor<F> {
    a.map(|x| x * c)
}

pub fn add_scalar<F: Scalar>(a: &Tensor<F>, c: F) -> Tensor<F> {
    a.map(|x| x + c)
}

pub fn sigmoid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let out = x.map(|v| F::one() / (F::one() + (-v).exp()));
    check_finite("sigmoid", &out);
    out
}

pub fn sigmoid_vjp<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (F::one() - s))
        .collect();
    Tensor::new(y.shape(), data)
}

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let k = F::c(0.7978845608028654); // sqrt(2/pi)
    let a = F::c(0.044715);
    let half = F::c(0.5);
    let out = x.map(|v| {
        let u = k * (v + a * v * v * v);
        half * v * (F::one() + u.tanh())
    });
    check_finite("gelu", &out);
    out
}

pub fn gelu_vjp<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let k = F::c(0.7978845608028654);
    let a = F::c(0.044715);
    let half = F::c(0.5);
    let three = F::c(3.0);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let u = k * (v + a * v * v * v);
            let t = u.tanh();
            let du = k * (F::one() + three * a * v * v);
            g * (half * (F::one() + t) + half * v * (F::one() - t * t) * du)
        })
        .collect();
    Tensor::new(x.shape(), data)
}

// --------------------------------------------------------------------------
// broadcasting by explicit expansion
// --------------------------------------------------------------------------

/// Insert a new axis of extent `n` at `axis`, repeating the input along it.
pub fn expand_axis<F: Scalar>(x: &Tensor<F>, axis: usize, n: usize) -> Result<Tensor<F>> {
    if axis > x.shape().len() {
        return Err(EsdtError::shape(
            "expand_axis",
            format!("axis {axis} for rank {}", x.shape().len()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis..].iter().product();
    let mut shape = x.shape().to_vec();
    shape.insert(axis, n);
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let row = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..n {
            data.extend_from_slice(row);
        }
    }
    Ok(Tensor::new(&shape, data))
}

/// Gradient of `expand_axis`: sum over the inserted axis.
pub fn expand_axis_vjp<F: Scalar>(dy: &Tensor<F>, axis: usize) -> Tensor<F> {
    let n = dy.shape()[axis];
    let outer: usize = dy.shape()[..axis].iter().product();
    let inner: usize = dy.shape()[axis + 1..].iter().product();
    let mut shape = dy.shape().to_vec();
    shape.remove(axis);
    let mut data = vec![F::zero(); outer * inner];
    for o in 0..outer {
        for r in 0..n {
            let src = &dy.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    Tensor::new(&shape, data)
}

// --------------------------------------------------------------------------
// linear / batched matmul
// --------------------------------------------------------------------------

const PAR_THRESHOLD: usize = 1 << 16;

/// `y = x · wᵀ (+ b)`, treating all leading axes of `x` as rows.
/// `w` is `[d_out, d_in]`; `b`, when present, is `[d_out]`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let rank = x.shape().len();
    if rank == 0 || w.shape().len() != 2 {
        return Err(EsdtError::shape(
            "linear",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    }
    let d_in = x.shape()[rank - 1];
    let (d_out, w_in) = (w.shape()[0], w.shape()[1]);
    if w_in != d_in {
        return Err(EsdtError::shape(
            "linear",
            format!("input dim {d_in} vs weight columns {w_in}"),
        ));
    }
    if let Some(bias) = b {
        if bias.shape() != [d_out] {
            return Err(EsdtError::shape(
                "linear",
                format!("bias {:?} vs d_out {d_out}", bias.shape()),
            ));
        }
    }
    let rows = x.numel() / d_in;
    meter_add((rows * d_out * d_in) as u64);

    let mut out = vec![F::zero(); rows * d_out];
    let work = rows * d_out * d_in;
    let run_row = |r: usize, out_row: &mut [F]| {
        let xr = &x.data()[r * d_in..(r + 1) * d_in];
        for (o, slot) in out_row.iter_mut().enumerate() {
            let wr = &w.data()[o * d_in..(o + 1) * d_in];
            let mut acc = F::zero();
            for i in 0..d_in {
                acc = acc + xr[i] * wr[i];
            }
            if let Some(bias) = b {
                acc = acc + bias.data()[o];
            }
            *slot = acc;
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(d_out)
            .enumerate()
            .for_each(|(r, row)| run_row(r, row));
    } else {
        for (r, row) in out.chunks_mut(d_out).enumerate() {
            run_row(r, row);
        }
    }

    let mut shape = x.shape().to_vec();
    shape[rank - 1] = d_out;
    let out = Tensor::new(&shape, out);
    check_finite("linear", &out);
    Ok(out)
}

/// Gradients of [`linear`]: `(dx, dw, db)`.
pub fn linear_vjp<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Option<Tensor<F>>) {
    let rank = x.shape().len();
    let d_in = x.shape()[rank - 1];
    let d_out = w.shape()[0];
    let rows = x.numel() / d_in;

    // dx = dy · w
    let mut dx = vec![F::zero(); rows * d_in];
    let dx_row = |r: usize, row: &mut [F]| {
        let g = &dy.data()[r * d_out..(r + 1) * d_out];
        for o in 0..d_out {
            let wr = &w.data()[o * d_in..(o + 1) * d_in];
            let go = g[o];
            for i in 0..d_in {
                row[i] = row[i] + go * wr[i];
            }
        }
    };
    if rows * d_out * d_in >= PAR_THRESHOLD {
        dx.par_chunks_mut(d_in)
            .enumerate()
            .for_each(|(r, row)| dx_row(r, row));
    } else {
        for (r, row) in dx.chunks_mut(d_in).enumerate() {
            dx_row(r, row);
        }
    }

    // dw = dyᵀ · x  (accumulated row-serially for determinism)
    let mut dw = vec![F::zero(); d_out * d_in];
    for r in 0..rows {
        let xr = &x.data()[r * d_in..(r + 1) * d_in];
        let g = &dy.data()[r * d_out..(r + 1) * d_out];
        for o in 0..d_out {
            let go = g[o];
            let wrow = &mut dw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                wrow[i] = wrow[i] + go * xr[i];
            }
        }
    }

    let db = has_bias.then(|| {
        let mut acc = vec![F::zero(); d_out];
        for r in 0..rows {
            let g = &dy.data()[r * d_out..(r + 1) * d_out];
            for o in 0..d_out {
                acc[o] = acc[o] + g[o];
            }
        }
        Tensor::new(&[d_out], acc)
    });

    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        db,
    )
}

/// Batched matrix product over identical leading axes:
/// `a[..., m, k] · b[..., k, n] -> [..., m, n]`.
pub fn bmm<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let ra = a.shape().len();
    let rb = b.shape().len();
    if ra < 2 || rb < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(EsdtError::shape(
            "bmm",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != kb {
        return Err(EsdtError::shape(
            "bmm",
            format!("inner dims {k} vs {kb}"),
        ));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    meter_add((batch * m * n * k) as u64);

    let mut out = vec![F::zero(); batch * m * n];
    let body = |idx: usize, dst: &mut [F]| {
        let (g, i) = (idx / m, idx % m);
        let ar = &a.data()[(g * m + i) * k..(g * m + i + 1) * k];
        let bb = &b.data()[g * k * n..(g + 1) * k * n];
        for (t, slot) in dst.iter_mut().enumerate() {
            let mut acc = F::zero();
            for j in 0..k {
                acc = acc + ar[j] * bb[j * n + t];
            }
            *slot = acc;
        }
    };
    if batch * m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(idx, dst)| body(idx, dst));
    } else {
        for (idx, dst) in out.chunks_mut(n).enumerate() {
            body(idx, dst);
        }
    }

    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.push(m);
    shape.push(n);
    let out = Tensor::new(&shape, out);
    check_finite("bmm", &out);
    Ok(out)
}

/// Gradients of [`bmm`]: `da = dy · bᵀ`, `db = aᵀ · dy`.
pub fn bmm_vjp<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let ra = a.shape().len();
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let n = b.shape()[ra - 1];
    let batch: usize = a.shape()[..ra - 2].iter().product();

    let mut da = vec![F::zero(); batch * m * k];
    let mut db = vec![F::zero(); batch * k * n];
    for g in 0..batch {
        let ab = &a.data()[g * m * k..(g + 1) * m * k];
        let bb = &b.data()[g * k * n..(g + 1) * k * n];
        let gy = &dy.data()[g * m * n..(g + 1) * m * n];
        let dab = &mut da[g * m * k..(g + 1) * m * k];
        let dbb = &mut db[g * k * n..(g + 1) * k * n];
        for i in 0..m {
            for j in 0..k {
                let mut acc = F::zero();
                for t in 0..n {
                    acc = acc + gy[i * n + t] * bb[j * n + t];
                }
                dab[i * k + j] = dab[i * k + j] + acc;
            }
        }
        for j in 0..k {
            for t in 0..n {
                let mut acc = F::zero();
                for i in 0..m {
                    acc = acc + ab[i * k + j] * gy[i * n + t];
                }
                dbb[j * n + t] = dbb[j * n + t] + acc;
            }
        }
    }
    (Tensor::new(a.shape(), da), Tensor::new(b.shape(), db))
}

// --------------------------------------------------------------------------
// softmax
// --------------------------------------------------------------------------

/// Row softmax over the last axis with max-subtraction. When a mask is
/// given (same extents), excluded entries get probability exactly zero.
/// A row with no admissible entry is rejected.
pub fn row_softmax<F: Scalar>(x: &Tensor<F>, mask: Option<&[bool]>) -> Result<Tensor<F>> {
    let rank = x.shape().len();
    if rank == 0 {
        return Err(EsdtError::shape("row_softmax", "scalar input"));
    }
    let n = x.shape()[rank - 1];
    let rows = x.numel() / n;
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(EsdtError::shape(
                "row_softmax",
                format!("mask len {} vs {} elements", m.len(), x.numel()),
            ));
        }
    }
    let mut out = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let mr = mask.map(|m| &m[r * n..(r + 1) * n]);
        let mut mx = F::neg_infinity();
        for i in 0..n {
            if mr.map_or(true, |m| m[i]) && xr[i] > mx {
                mx = xr[i];
            }
        }
        if mx == F::neg_infinity() {
            return Err(EsdtError::Numeric(format!(
                "row_softmax: row {r} has no admissible entry"
            )));
        }
        let mut denom = F::zero();
        let or = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            if mr.map_or(true, |m| m[i]) {
                let e = (xr[i] - mx).exp();
                or[i] = e;
                denom = denom + e;
            }
        }
        for v in or.iter_mut() {
            *v = *v / denom;
        }
    }
    let out = Tensor::new(x.shape(), out);
    check_finite("row_softmax", &out);
    Ok(out)
}

pub fn row_softmax_vjp<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let rank = y.shape().len();
    let n = y.shape()[rank - 1];
    let rows = y.numel() / n;
    let mut dx = vec![F::zero(); y.numel()];
    for r in 0..rows {
        let yr = &y.data()[r * n..(r + 1) * n];
        let gr = &dy.data()[r * n..(r + 1) * n];
        let mut dot = F::zero();
        for i in 0..n {
            dot = dot + yr[i] * gr[i];
        }
        let dr = &mut dx[r * n..(r + 1) * n];
        for i in 0..n {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::new(y.shape(), dx)
}

// --------------------------------------------------------------------------
// layer norm
// --------------------------------------------------------------------------

/// Layer normalization over the last axis with affine terms.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<Tensor<F>> {
    let rank = x.shape().len();
    let n = x.shape()[rank - 1];
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(EsdtError::shape(
            "layer_norm",
            format!(
                "affine {:?}/{:?} vs feature dim {n}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.numel() / n;
    let eps = F::c(LAYER_NORM_EPS);
    let inv_n = F::one() / F::c(n as f64);
    let mut out = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let mut mean = F::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = F::zero();
        for &v in xr {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = F::one() / (var + eps).sqrt();
        let or = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            or[i] = (xr[i] - mean) * inv_std * gamma.data()[i] + beta.data()[i];
        }
    }
    let out = Tensor::new(x.shape(), out);
    check_finite("layer_norm", &out);
    Ok(out)
}

/// Gradients of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_vjp<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let rank = x.shape().len();
    let n = x.shape()[rank - 1];
    let rows = x.numel() / n;
    let eps = F::c(LAYER_NORM_EPS);
    let inv_n = F::one() / F::c(n as f64);

    let mut dx = vec![F::zero(); x.numel()];
    let mut dgamma = vec![F::zero(); n];
    let mut dbeta = vec![F::zero(); n];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let gr = &dy.data()[r * n..(r + 1) * n];
        let mut mean = F::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = F::zero();
        for &v in xr {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = F::one() / (var + eps).sqrt();

        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for i in 0..n {
            let xhat = (xr[i] - mean) * inv_std;
            let gg = gr[i] * gamma.data()[i];
            sum_g = sum_g + gg;
            sum_gx = sum_gx + gg * xhat;
            dgamma[i] = dgamma[i] + gr[i] * xhat;
            dbeta[i] = dbeta[i] + gr[i];
        }
        let dr = &mut dx[r * n..(r + 1) * n];
        for i in 0..n {
            let xhat = (xr[i] - mean) * inv_std;
            let gg = gr[i] * gamma.data()[i];
            dr[i] = inv_std * (gg - inv_n * sum_g - xhat * inv_n * sum_gx);
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(&[n], dgamma),
        Tensor::new(&[n], dbeta),
    )
}

// --------------------------------------------------------------------------
// convolution / pooling
// --------------------------------------------------------------------------

/// 2x2 convolution with stride 2, no padding: `x[B,Ci,H,W]` with even `H`,
/// `W` and kernel `w[Co,Ci,2,2]` to `[B,Co,H/2,W/2]`.
pub fn conv2x2s2<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let [bs, ci, h, wd] = dims4(x, "conv2x2s2 input")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != ci || ws[2] != 2 || ws[3] != 2 {
        return Err(EsdtError::shape(
            "conv2x2s2",
            format!("kernel {:?} vs {ci} input channels", ws),
        ));
    }
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(EsdtError::shape(
            "conv2x2s2",
            format!("odd spatial extents {h}x{wd} (no implicit padding)"),
        ));
    }
    let co = ws[0];
    let (ho, wo) = (h / 2, wd / 2);
    meter_add((bs * co * ho * wo * ci * 4) as u64);

    let mut out = vec![F::zero(); bs * co * ho * wo];
    for bi in 0..bs {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(F::zero(), |bias| bias.data()[oc]);
                    for icn in 0..ci {
                        let xbase = ((bi * ci + icn) * h + oy * 2) * wd + ox * 2;
                        let wbase = (oc * ci + icn) * 4;
                        acc = acc + x.data()[xbase] * w.data()[wbase];
                        acc = acc + x.data()[xbase + 1] * w.data()[wbase + 1];
                        acc = acc + x.data()[xbase + wd] * w.data()[wbase + 2];
                        acc = acc + x.data()[xbase + wd + 1] * w.data()[wbase + 3];
                    }
                    out[((bi * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    let out = Tensor::new(&[bs, co, ho, wo], out);
    check_finite("conv2x2s2", &out);
    Ok(out)
}

/// Gradients of [`conv2x2s2`]: `(dx, dw, db)`.
pub fn conv2x2s2_vjp<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    has_bias: bool,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Option<Tensor<F>>) {
    let (bs, ci, h, wd) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let co = w.shape()[0];
    let (ho, wo) = (h / 2, wd / 2);
    let mut dx = vec![F::zero(); x.numel()];
    let mut dw = vec![F::zero(); w.numel()];
    let mut db = vec![F::zero(); co];
    for bi in 0..bs {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dy.data()[((bi * co + oc) * ho + oy) * wo + ox];
                    db[oc] = db[oc] + g;
                    for icn in 0..ci {
                        let xbase = ((bi * ci + icn) * h + oy * 2) * wd + ox * 2;
                        let wbase = (oc * ci + icn) * 4;
                        dx[xbase] = dx[xbase] + g * w.data()[wbase];
                        dx[xbase + 1] = dx[xbase + 1] + g * w.data()[wbase + 1];
                        dx[xbase + wd] = dx[xbase + wd] + g * w.data()[wbase + 2];
                        dx[xbase + wd + 1] = dx[xbase + wd + 1] + g * w.data()[wbase + 3];
                        dw[wbase] = dw[wbase] + g * x.data()[xbase];
                        dw[wbase + 1] = dw[wbase + 1] + g * x.data()[xbase + 1];
                        dw[wbase + 2] = dw[wbase + 2] + g * x.data()[xbase + wd];
                        dw[wbase + 3] = dw[wbase + 3] + g * x.data()[xbase + wd + 1];
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        has_bias.then(|| Tensor::new(&[co], db)),
    )
}

/// Mean over the spatial axes of a channel-first activation:
/// `[B,C,H,W] -> [B,C]`.
pub fn spatial_mean_pool<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [bs, c, h, w] = dims4(x, "spatial_mean_pool")?;
    let inv = F::one() / F::c((h * w) as f64);
    let mut out = vec![F::zero(); bs * c];
    for i in 0..bs * c {
        let mut acc = F::zero();
        for &v in &x.data()[i * h * w..(i + 1) * h * w] {
            acc = acc + v;
        }
        out[i] = acc * inv;
    }
    Ok(Tensor::new(&[bs, c], out))
}

pub fn spatial_mean_pool_vjp<F: Scalar>(x_shape: &[usize], dy: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = F::one() / F::c((h * w) as f64);
    let mut dx = vec![F::zero(); x_shape.iter().product()];
    for i in 0..dy.numel() {
        let g = dy.data()[i] * inv;
        for v in &mut dx[i * h * w..(i + 1) * h * w] {
            *v = g;
        }
    }
    Tensor::new(x_shape, dx)
}

// --------------------------------------------------------------------------
// structural ops
// --------------------------------------------------------------------------

pub fn concat<F: Scalar>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(EsdtError::shape("concat", "no inputs"));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(EsdtError::shape("concat", format!("axis {axis} rank {rank}")));
    }
    for p in parts {
        if p.shape().len() != rank
            || p.shape()[..axis] != parts[0].shape()[..axis]
            || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
        {
            return Err(EsdtError::shape(
                "concat",
                format!("{:?} vs {:?}", p.shape(), parts[0].shape()),
            ));
        }
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total_axis;
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Ok(Tensor::new(&shape, data))
}

/// Contiguous slice along one axis.
pub fn narrow<F: Scalar>(
    x: &Tensor<F>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<F>> {
    let rank = x.shape().len();
    if axis >= rank || start + len > x.shape()[axis] {
        return Err(EsdtError::shape(
            "narrow",
            format!(
                "axis {axis} [{start}..{}] of {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let ax = x.shape()[axis];
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ax + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::new(&shape, data))
}

/// Scatter `dy` back into the `narrow`-ed region of a zero tensor shaped
/// like the original input.
pub fn narrow_vjp<F: Scalar>(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    dy: &Tensor<F>,
) -> Tensor<F> {
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let ax = x_shape[axis];
    let len = dy.shape()[axis];
    let mut dx = vec![F::zero(); x_shape.iter().product()];
    for o in 0..outer {
        let src = &dy.data()[o * len * inner..(o + 1) * len * inner];
        let base = (o * ax + start) * inner;
        dx[base..base + len * inner].copy_from_slice(src);
    }
    Tensor::new(x_shape, dx)
}

pub fn permute<F: Scalar>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(EsdtError::shape(
            "permute",
            format!("axes {:?} for rank {rank}", axes),
        ));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut data = vec![F::zero(); x.numel()];
    let mut idx = vec![0usize; rank];
    for (o, slot) in data.iter_mut().enumerate() {
        let mut rem = o;
        for d in 0..rank {
            idx[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[axes[d]];
        }
        *slot = x.data()[src];
    }
    Ok(Tensor::new(&out_shape, data))
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row gather: `table[K,d]` indexed by `idx` to `[len(idx), d]`.
pub fn select_rows<F: Scalar>(table: &Tensor<F>, idx: &[usize]) -> Result<Tensor<F>> {
    if table.shape().len() != 2 {
        return Err(EsdtError::shape(
            "select_rows",
            format!("table {:?}", table.shape()),
        ));
    }
    let (k, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= k {
            return Err(EsdtError::shape(
                "select_rows",
                format!("index {i} out of {k} rows"),
            ));
        }
        data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Ok(Tensor::new(&[idx.len(), d], data))
}

pub fn select_rows_vjp<F: Scalar>(
    table_shape: &[usize],
    idx: &[usize],
    dy: &Tensor<F>,
) -> Tensor<F> {
    let d = table_shape[1];
    let mut dt = vec![F::zero(); table_shape.iter().product()];
    for (r, &i) in idx.iter().enumerate() {
        let src = &dy.data()[r * d..(r + 1) * d];
        let dst = &mut dt[i * d..(i + 1) * d];
        for (a, &g) in dst.iter_mut().zip(src) {
            *a = *a + g;
        }
    }
    Tensor::new(table_shape, dt)
}

// --------------------------------------------------------------------------
// reductions
// --------------------------------------------------------------------------

pub fn sum_all<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    Tensor::scalar(x.data().iter().copied().sum())
}

pub fn mean_all<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let n = F::c(x.numel() as f64);
    Tensor::scalar(x.data().iter().copied().sum::<F>() / n)
}

/// Mean over every axis except the leading one: `[B, ...] -> [B]`.
pub fn mean_tail<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape().is_empty() {
        return Err(EsdtError::shape("mean_tail", "scalar input"));
    }
    let b = x.shape()[0];
    let inner = x.numel() / b;
    let inv = F::one() / F::c(inner as f64);
    let mut out = vec![F::zero(); b];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = F::zero();
        for &v in &x.data()[i * inner..(i + 1) * inner] {
            acc = acc + v;
        }
        *slot = acc * inv;
    }
    Ok(Tensor::new(&[b], out))
}

pub fn dot<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(EsdtError::shape(
            "dot",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let acc = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .sum::<F>();
    Ok(Tensor::scalar(acc))
}

/// Space-to-channel rearrangement with patch size `p`, channel-major
/// ordering: output channel `c*p*p + dy*p + dx` holds input channel `c` at
/// spatial offset `(dy, dx)`. `[B,C,H,W] -> [B,C*p*p,H/p,W/p]`.
pub fn space_to_channel<F: Scalar>(x: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let [bs, c, h, w] = dims4(x, "space_to_channel")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(EsdtError::shape(
            "space_to_channel",
            format!("patch {p} must divide extents {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![F::zero(); x.numel()];
    for b in 0..bs {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let co = ci * p * p + (y % p) * p + (xx % p);
                    out[((b * c * p * p + co) * ho + y / p) * wo + xx / p] =
                        x.data()[((b * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Ok(Tensor::new(&[bs, c * p * p, ho, wo], out))
}

/// Exact inverse of [`space_to_channel`].
pub fn channel_to_space<F: Scalar>(x: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let [bs, cp, ho, wo] = dims4(x, "channel_to_space")?;
    if p == 0 || cp % (p * p) != 0 {
        return Err(EsdtError::shape(
            "channel_to_space",
            format!("channels {cp} not divisible by patch area {}", p * p),
        ));
    }
    let c = cp / (p * p);
    let (h, w) = (ho * p, wo * p);
    let mut out = vec![F::zero(); x.numel()];
    for b in 0..bs {
        for co in 0..cp {
            let (ci, rem) = (co / (p * p), co % (p * p));
            let (dy, dx) = (rem / p, rem % p);
            for y in 0..ho {
                for xx in 0..wo {
                    out[((b * c + ci) * h + y * p + dy) * w + xx * p + dx] =
                        x.data()[((b * cp + co) * ho + y) * wo + xx];
                }
            }
        }
    }
    Ok(Tensor::new(&[bs, c, h, w], out))
}

fn dims4<F: Scalar>(x: &Tensor<F>, ctx: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(EsdtError::shape(ctx, format!("{:?} is not 4-D", x.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let y = row_softmax(&Tensor::<f64>::new(&[1, 2], vec![0.0, 0.0]), None).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]);
        assert!(row_softmax(&x, Some(&[false, false])).is_err());
    }

    #[test]
    fn identity_matmul_preserves_input() {
        let m = Tensor::<f64>::new(&[2, 2], vec![3.0, -1.0, 0.5, 2.0]);
        let y = bmm(&Tensor::eye(2), &m).unwrap();
        assert_eq!(y.data(), m.data());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_pre_affine() {
        let x = Tensor::<f64>::full(&[1, 4], 3.5);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn conv_rejects_odd_extents() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2x2s2(&x, &w, None).is_err());
    }

    #[test]
    fn conv_averaging_taps_preserve_constants() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 2.5);
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 0.25);
        let y = conv2x2s2(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for &v in y.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trips() {
        let x = Tensor::<f32>::new(&[2, 3, 4], (0..24).map(|i| i as f32).collect());
        let p = permute(&x, &[2, 0, 1]).unwrap();
        let back = permute(&p, &inverse_axes(&[2, 0, 1])).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn meter_counts_linear_mas() {
        meter_start();
        let x = Tensor::<f32>::zeros(&[3, 5]);
        let w = Tensor::<f32>::zeros(&[7, 5]);
        let _ = linear(&x, &w, None).unwrap();
        assert_eq!(meter_stop(), 3 * 7 * 5);
    }

    #[test]
    fn expand_axis_sums_back() {
        let x = Tensor::<f64>::new(&[2, 3], (0..6).map(|i| i as f64).collect());
        let e = expand_axis(&x, 1, 4).unwrap();
        assert_eq!(e.shape(), &[2, 4, 3]);
        let back = expand_axis_vjp(&e, 1);
        for (i, &v) in back.data().iter().enumerate() {
            assert_eq!(v, 4.0 * i as f64);
        }
    }
}
