//! Raw loops behind the tape ops. All buffers are row-major.

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f32 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f32>() + tail
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_bt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_at_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Output extent of a convolution along one spatial axis, or `None` when the
/// kernel does not fit the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `[cin,h,w]` into columns `offset..offset+ho*wo` of a
/// `[cin*kh*kw, stride_cols]` matrix.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32], stride_cols: usize, offset: usize) {
    let hw = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * stride_cols + offset..r * stride_cols + offset + hw];
                // Valid output columns: 0 <= oj*stride + kj - pad < w.
                let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.wo);
                let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo) } else { 0 }.max(lo);
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii as usize >= g.h {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    row[..lo].fill(0.0);
                    row[hi..].fill(0.0);
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Folds columns `offset..offset+ho*wo` back into one sample, accumulating
/// overlaps.
fn col2im_acc(cols: &[f32], g: &ConvGeom, x: &mut [f32], stride_cols: usize, offset: usize) {
    let hw = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * stride_cols + offset..r * stride_cols + offset + hw];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        x[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
}

/// Whole-batch column matrix `[cin*kh*kw, batch*ho*wo]`.
fn batch_cols(x: &[f32], batch: usize, g: &ConvGeom) -> Vec<f32> {
    let in_len = g.cin * g.h * g.w;
    let hw = g.col_cols();
    let total = batch * hw;
    let mut cols = vec![0.0; g.col_rows() * total];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols, total, b * hw);
    }
    cols
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, batch: usize, cout: usize, g: &ConvGeom) -> Vec<f32> {
    let hw = g.col_cols();
    let total = batch * hw;
    let cols = batch_cols(x, batch, g);
    // [cout, batch*hw], then transposed to [batch, cout, hw].
    let mut y = vec![0.0; cout * total];
    gemm_acc(w, &cols, &mut y, cout, g.col_rows(), total);
    let mut out = vec![0.0; batch * cout * hw];
    for co in 0..cout {
        let bv = bias.map_or(0.0, |b| b[co]);
        for b in 0..batch {
            let src = &y[co * total + b * hw..co * total + (b + 1) * hw];
            let dst = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let in_len = g.cin * g.h * g.w;
    let hw = g.col_cols();
    let total = batch * hw;
    // grad_out as [cout, batch*hw].
    let mut go = vec![0.0; cout * total];
    for b in 0..batch {
        for co in 0..cout {
            go[co * total + b * hw..co * total + (b + 1) * hw]
                .copy_from_slice(&grad_out[(b * cout + co) * hw..(b * cout + co + 1) * hw]);
        }
    }
    if let Some(db) = db {
        for co in 0..cout {
            db[co] += go[co * total..(co + 1) * total].iter().sum::<f32>();
        }
    }
    if let Some(dw) = dw {
        let cols = batch_cols(x, batch, g);
        gemm_bt_acc(&go, &cols, dw, cout, total, g.col_rows());
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; g.col_rows() * total];
        gemm_at_acc(w, &go, &mut dcols, cout, g.col_rows(), total);
        for b in 0..batch {
            col2im_acc(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len], total, b * hw);
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `logits / temperature` for one row.
pub(crate) fn softmax_row(logits: &[f32], temperature: f32, out: &mut [f32]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut denom = 0.0f32;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z / temperature - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

/// `log softmax(logits / temperature)` for one row.
pub(crate) fn log_softmax_row(logits: &[f32], temperature: f32, out: &mut [f32]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = logits.iter().map(|&z| (z / temperature - max).exp()).sum::<f32>().ln() + max;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z / temperature - lse;
    }
}
