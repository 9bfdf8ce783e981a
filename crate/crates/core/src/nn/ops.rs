//! Forward and backward implementations of the tensor operations.
//!
//! Backward functions take the saved forward inputs (or a cache) plus the
//! upstream gradient and return input gradients. All loops keep the innermost
//! axis contiguous so the compiler can vectorize them.

use super::{NnError, Tensor};

fn require_2d(op: &'static str, t: &Tensor) -> Result<(), NnError> {
    if t.shape().len() != 2 {
        return Err(NnError::Rank {
            op,
            expected: "2-D tensor",
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// C = A . B for 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    require_2d("matmul", a)?;
    require_2d("matmul", b)?;
    let (n, m) = (a.rows(), a.cols());
    let (mb, p) = (b.rows(), b.cols());
    if m != mb {
        return Err(NnError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    let ad = a.data();
    let bd = b.data();
    let cd = out.data_mut();
    for i in 0..n {
        let a_row = &ad[i * m..(i + 1) * m];
        let c_row = &mut cd[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &bd[k * p..(k + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
    Ok(out)
}

/// C = A . B^T: rows of both operands are dotted directly.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    require_2d("matmul_nt", a)?;
    require_2d("matmul_nt", b)?;
    let (n, m) = (a.rows(), a.cols());
    let (p, mb) = (b.rows(), b.cols());
    if m != mb {
        return Err(NnError::Shape {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    let ad = a.data();
    let bd = b.data();
    let cd = out.data_mut();
    for i in 0..n {
        let a_row = &ad[i * m..(i + 1) * m];
        let c_row = &mut cd[i * p..(i + 1) * p];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &bd[j * m..(j + 1) * m];
            *cj = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// C = A^T . B, accumulated as rank-1 updates over the shared leading axis.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    require_2d("matmul_tn", a)?;
    require_2d("matmul_tn", b)?;
    let (m, n) = (a.rows(), a.cols());
    let (mb, p) = (b.rows(), b.cols());
    if m != mb {
        return Err(NnError::Shape {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, p]);
    let ad = a.data();
    let bd = b.data();
    let cd = out.data_mut();
    for k in 0..m {
        let a_row = &ad[k * n..(k + 1) * n];
        let b_row = &bd[k * p..(k + 1) * p];
        for (i, &aki) in a_row.iter().enumerate() {
            let c_row = &mut cd[i * p..(i + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
    Ok(out)
}

/// Gradients of C = A . B: dA = dC . B^T, dB = A^T . dC.
pub fn matmul_backward(a: &Tensor, b: &Tensor, d_out: &Tensor) -> (Tensor, Tensor) {
    let da = matmul_nt(d_out, b).expect("matmul_backward: d_out/b shapes");
    let db = matmul_tn(a, d_out).expect("matmul_backward: a/d_out shapes");
    (da, db)
}

/// Row-wise softmax with max subtraction. Each output row sums to 1 and is
/// strictly positive.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NnError> {
    require_2d("softmax_rows", x)?;
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, d]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let o_row = &mut od[i * d..(i + 1) * d];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in o_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        o_row.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}

/// Softmax backward from the forward *output* `y`:
/// dx_row = y_row * (dy_row - dot(dy_row, y_row)).
pub fn softmax_rows_backward(y: &Tensor, d_out: &Tensor) -> Tensor {
    assert_eq!(y.shape(), d_out.shape(), "softmax backward shape mismatch");
    let (n, d) = (y.rows(), y.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    let yd = y.data();
    let gd = d_out.data();
    let xd = dx.data_mut();
    for i in 0..n {
        let y_row = &yd[i * d..(i + 1) * d];
        let g_row = &gd[i * d..(i + 1) * d];
        let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
        let x_row = &mut xd[i * d..(i + 1) * d];
        for ((x, &yv), &gv) in x_row.iter_mut().zip(y_row).zip(g_row) {
            *x = yv * (gv - dot);
        }
    }
    dx
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF via erf.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.zero_grad();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * pdf
}

/// Elementwise backward from the saved forward *input*.
pub fn gelu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    assert_eq!(x.shape(), d_out.shape(), "gelu backward shape mismatch");
    let mut dx = Tensor::zeros(x.shape());
    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(x.data()).zip(d_out.data()) {
        *d = gelu_grad_scalar(xv) * gv;
    }
    dx
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved forward state for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized rows (before gain/bias), n x d.
    pub xhat: Tensor,
    /// Per-row 1/sqrt(var + eps).
    pub rstd: Vec<f64>,
}

/// Per-row normalization to mean 0 / variance 1 (eps 1e-5), then affine by
/// `gain` and `bias` (length = columns).
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormCache), NnError> {
    require_2d("layer_norm", x)?;
    let (n, d) = (x.rows(), x.cols());
    if gain.len() != d || bias.len() != d {
        return Err(NnError::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, d]);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut rstd = vec![0.0; n];
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    {
        let od = out.data_mut();
        let hd = xhat.data_mut();
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            let h_row = &mut hd[i * d..(i + 1) * d];
            let o_row = &mut od[i * d..(i + 1) * d];
            for (((h, o), &v), (&g, &b)) in h_row
                .iter_mut()
                .zip(o_row.iter_mut())
                .zip(row)
                .zip(gd.iter().zip(bd))
            {
                *h = (v - mean) * r;
                *o = *h * g + b;
            }
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Exact layer-norm backward. Returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (cache.xhat.rows(), cache.xhat.cols());
    assert_eq!(d_out.shape(), &[n, d], "layer_norm backward shape mismatch");
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let hd = cache.xhat.data();
    let gd = gain.data();
    let od = d_out.data();
    let dxd = dx.data_mut();
    let dgd = dgain.data_mut();
    let dbd = dbias.data_mut();
    for i in 0..n {
        let h_row = &hd[i * d..(i + 1) * d];
        let g_row = &od[i * d..(i + 1) * d];
        // accumulate affine grads and the two row means in one sweep
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for (j, (&h, &g)) in h_row.iter().zip(g_row).enumerate() {
            dbd[j] += g;
            dgd[j] += g * h;
            let dxhat = g * gd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * h;
        }
        let mean_dxhat = sum_dxhat / d as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / d as f64;
        let r = cache.rstd[i];
        let x_row = &mut dxd[i * d..(i + 1) * d];
        for ((x, &h), (&g, &gn)) in x_row
            .iter_mut()
            .zip(h_row)
            .zip(g_row.iter().zip(gd))
        {
            let dxhat = g * gn;
            *x = r * (dxhat - mean_dxhat - h * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Elementwise sum of two same-shape tensors. Backward is pass-through to
/// both operands.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x + y;
    }
    Ok(out)
}

/// Broadcast-adds a length-d bias to every row of a 2-D tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    require_2d("add_bias", x)?;
    let d = x.cols();
    if bias.len() != d {
        return Err(NnError::Shape {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    out.zero_grad();
    let bd = bias.data();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (o, &b) in row.iter_mut().zip(bd) {
            *o += b;
        }
    }
    Ok(out)
}

/// Bias gradient of `add_bias`: column sums of the upstream gradient. The
/// input gradient is the upstream gradient unchanged.
pub fn add_bias_backward(d_out: &Tensor) -> Tensor {
    let d = d_out.cols();
    let mut db = Tensor::zeros(&[d]);
    let dbd = db.data_mut();
    for row in d_out.data().chunks_exact(d) {
        for (b, &g) in dbd.iter_mut().zip(row) {
            *b += g;
        }
    }
    db
}

/// Multiplies every element by a scalar. Backward scales the upstream
/// gradient by the same factor.
pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    let mut out = x.clone();
    out.zero_grad();
    out.data_mut().iter_mut().for_each(|v| *v *= factor);
    out
}

/// 2-D transpose. Backward is transpose of the upstream gradient.
pub fn transpose(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 2, "transpose on non-2D tensor");
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[d, n]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..d {
            od[j * n + i] = xd[i * d + j];
        }
    }
    out
}

/// Concatenates 2-D tensors with equal row counts along the last axis.
pub fn concat_last_axis(parts: &[&Tensor]) -> Result<Tensor, NnError> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let n = parts[0].rows();
    for p in parts {
        require_2d("concat_last_axis", p)?;
        if p.rows() != n {
            return Err(NnError::Shape {
                op: "concat_last_axis",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(&[n, total]);
    let od = out.data_mut();
    for i in 0..n {
        let mut offset = 0;
        for p in parts {
            let w = p.cols();
            od[i * total + offset..i * total + offset + w].copy_from_slice(p.row(i));
            offset += w;
        }
    }
    Ok(out)
}

/// Backward of `concat_last_axis`: slices the upstream gradient back into the
/// given widths. Identical to `split_last_axis`.
pub fn concat_last_axis_backward(d_out: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    split_last_axis(d_out, widths).expect("concat backward widths must partition the last axis")
}

/// Splits a 2-D tensor along the last axis into parts of the given widths.
pub fn split_last_axis(x: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>, NnError> {
    require_2d("split_last_axis", x)?;
    let (n, d) = (x.rows(), x.cols());
    if widths.iter().sum::<usize>() != d {
        return Err(NnError::Shape {
            op: "split_last_axis",
            lhs: x.shape().to_vec(),
            rhs: widths.to_vec(),
        });
    }
    let xd = x.data();
    let mut parts: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(&[n, w])).collect();
    for i in 0..n {
        let mut offset = 0;
        for (p, &w) in parts.iter_mut().zip(widths) {
            let row = &xd[i * d + offset..i * d + offset + w];
            p.data_mut()[i * w..(i + 1) * w].copy_from_slice(row);
            offset += w;
        }
    }
    Ok(parts)
}

/// Result of a masked mean-squared-error evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub valid_count: usize,
    /// Set when the mask had no valid cells and the loss defaulted to 0.
    pub all_invalid: bool,
}

/// Mean squared error over valid cells only. An all-invalid mask yields
/// loss 0 with the warning flag set.
pub fn mse_masked(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<MaskedLoss, NnError> {
    if pred.shape() != target.shape() || pred.len() != mask.len() {
        return Err(NnError::Shape {
            op: "mse_masked",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask) {
        if m {
            let e = p - t;
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(MaskedLoss {
            value: 0.0,
            valid_count: 0,
            all_invalid: true,
        });
    }
    Ok(MaskedLoss {
        value: sum / count as f64,
        valid_count: count,
        all_invalid: false,
    })
}

/// Gradient of `mse_masked` w.r.t. predictions: 2(p - t)/n_valid on valid
/// cells, 0 elsewhere.
pub fn mse_masked_backward(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Tensor {
    let mut dp = Tensor::zeros(pred.shape());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return dp;
    }
    let inv = 2.0 / count as f64;
    for (((d, &p), &t), &m) in dp
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
        .zip(mask)
    {
        if m {
            *d = inv * (p - t);
        }
    }
    dp
}
