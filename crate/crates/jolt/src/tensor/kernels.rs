//! Raw compute kernels over flat row-major slices.
//!
//! The tape ops and the tape-free inference paths both call these, so a
//! single oracle test covers every consumer. Backward kernels accumulate
//! (`+=`) into their output buffer; callers zero or reuse as needed.
//!
//! Convolutions run as per-sample im2col + dgemm. Working one sample at a
//! time keeps each sample's arithmetic (and therefore its bits) identical
//! no matter how a batch is grouped, which the sampler and cache tests
//! rely on.

/// Output spatial size of a strided convolution.
pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + k - 2 * pad
}

/// Row-major matrix product C = alpha*A*B + beta*C with explicit strides.
/// Callers guarantee the stride/extent combinations stay inside each slice.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) as isize * rsa + (k - 1) as isize * csa < a.len() as isize);
    debug_assert!((k - 1) as isize * rsb + (n - 1) as isize * csb < b.len() as isize);
    debug_assert!((m - 1) as isize * rsc + (n - 1) as isize * csc < c.len() as isize);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Unrolls one sample's [cin,h,w] plane into patch columns: row
/// (ci*kh + ky)*kw + kx, column oy*ow + ox holds the input value under
/// kernel offset (ky,kx) at output position (oy,ox), zero where the
/// (stride, pad) window leaves the image.
#[allow(clippy::too_many_arguments)]
fn im2col(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let n = oh * ow;
    debug_assert_eq!(cols.len(), cin * kh * kw * n);
    let mut row = 0usize;
    for ci in 0..cin {
        let iplane = ci * h;
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let irow = (iplane + iy as usize) * w;
                    if stride == 1 {
                        // ix = ox + kx - pad: one contiguous in-bounds span.
                        let lo = pad.saturating_sub(kx).min(ow);
                        let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
                        drow[..lo].fill(0.0);
                        let src0 = irow + lo + kx - pad;
                        drow[lo..hi].copy_from_slice(&inp[src0..src0 + (hi - lo)]);
                        drow[hi..].fill(0.0);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                inp[irow + ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates patch-column gradients
/// back onto the [cin,h,w] plane.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    d_inp: &mut [f64],
) {
    let n = oh * ow;
    let mut row = 0usize;
    for ci in 0..cin {
        let iplane = ci * h;
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = (iplane + iy as usize) * w;
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            d_inp[irow + ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Plain convolution, kernel layout [cout, cin, kh, kw]: per sample,
/// out = ker · im2col(inp) + bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    inp: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(out.len(), bsz * cout * oh * ow);
    let (kk, n) = (cin * kh * kw, oh * ow);
    let mut cols = vec![0.0; kk * n];
    for bi in 0..bsz {
        im2col(
            &inp[bi * cin * h * w..(bi + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, pad, oh, ow, &mut cols,
        );
        let oplane = &mut out[bi * cout * n..(bi + 1) * cout * n];
        dgemm(
            cout, kk, n, 1.0,
            ker, kk as isize, 1,
            &cols, n as isize, 1,
            0.0, oplane, n as isize, 1,
        );
        for co in 0..cout {
            let b = bias[co];
            for v in &mut oplane[co * n..(co + 1) * n] {
                *v += b;
            }
        }
    }
}

/// d_inp += gradient through [`conv2d_fwd`]: per sample,
/// col2im(kerᵀ · d_out).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input(
    ker: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_out: &[f64],
    d_inp: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let (kk, n) = (cin * kh * kw, oh * ow);
    let mut d_cols = vec![0.0; kk * n];
    for bi in 0..bsz {
        let oplane = &d_out[bi * cout * n..(bi + 1) * cout * n];
        dgemm(
            kk, cout, n, 1.0,
            ker, 1, kk as isize,
            oplane, n as isize, 1,
            0.0, &mut d_cols, n as isize, 1,
        );
        col2im_add(
            &d_cols,
            cin, h, w, kh, kw, stride, pad, oh, ow,
            &mut d_inp[bi * cin * h * w..(bi + 1) * cin * h * w],
        );
    }
}

/// d_ker += gradient through [`conv2d_fwd`]: per sample,
/// d_out · im2col(inp)ᵀ, accumulated over the batch.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_kernel(
    inp: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_out: &[f64],
    d_ker: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let (kk, n) = (cin * kh * kw, oh * ow);
    let mut cols = vec![0.0; kk * n];
    for bi in 0..bsz {
        im2col(
            &inp[bi * cin * h * w..(bi + 1) * cin * h * w],
            cin, h, w, kh, kw, stride, pad, oh, ow, &mut cols,
        );
        let oplane = &d_out[bi * cout * n..(bi + 1) * cout * n];
        dgemm(
            cout, n, kk, 1.0,
            oplane, n as isize, 1,
            &cols, 1, n as isize,
            1.0, d_ker, kk as isize, 1,
        );
    }
}

pub fn conv2d_bwd_bias(d_out: &[f64], bsz: usize, cout: usize, oh: usize, ow: usize, d_bias: &mut [f64]) {
    for bi in 0..bsz {
        for co in 0..cout {
            let obase = ((bi * cout + co) * oh) * ow;
            let mut s = 0.0;
            for v in &d_out[obase..obase + oh * ow] {
                s += v;
            }
            d_bias[co] += s;
        }
    }
}

// Transposed convolution. Kernel layout is [cin, cout, kh, kw]; output pixel
// (oy, ox) gathers input pixels (iy, ix) with oy = iy*stride - pad + ky.

/// Transposed convolution, kernel layout [cin, cout, kh, kw]: per sample,
/// col2im-scatter of kerᵀ · inp, where the scatter runs the convolution
/// geometry in reverse (input pixel (iy,ix) stamps output row
/// iy·stride − pad + ky).
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_fwd(
    inp: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_transpose_out_dim(h, kh, stride, pad);
    let ow = conv_transpose_out_dim(w, kw, stride, pad);
    debug_assert_eq!(out.len(), bsz * cout * oh * ow);
    let (kk, n_in, n_out) = (cout * kh * kw, h * w, oh * ow);
    let mut cols = vec![0.0; kk * n_in];
    for bi in 0..bsz {
        let iplane = &inp[bi * cin * n_in..(bi + 1) * cin * n_in];
        // cols = kerᵀ[kk × cin] · inp[cin × n_in]; ker is row-major
        // [cin × kk], so the transpose is a stride swap.
        dgemm(
            kk, cin, n_in, 1.0,
            ker, 1, kk as isize,
            iplane, n_in as isize, 1,
            0.0, &mut cols, n_in as isize, 1,
        );
        let oplane = &mut out[bi * cout * n_out..(bi + 1) * cout * n_out];
        for co in 0..cout {
            oplane[co * n_out..(co + 1) * n_out].fill(bias[co]);
        }
        // Reverse geometry: im2col positions exchange input and output.
        col2im_add(&cols, cout, oh, ow, kh, kw, stride, pad, h, w, oplane);
    }
}

/// d_inp += gradient through [`conv_transpose2d_fwd`]: per sample,
/// ker · im2col(d_out) — the reverse geometry makes the gradient an
/// ordinary convolution of d_out.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_bwd_input(
    ker: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_out: &[f64],
    d_inp: &mut [f64],
) {
    let oh = conv_transpose_out_dim(h, kh, stride, pad);
    let ow = conv_transpose_out_dim(w, kw, stride, pad);
    let (kk, n_in, n_out) = (cout * kh * kw, h * w, oh * ow);
    let mut cols = vec![0.0; kk * n_in];
    for bi in 0..bsz {
        im2col(
            &d_out[bi * cout * n_out..(bi + 1) * cout * n_out],
            cout, oh, ow, kh, kw, stride, pad, h, w, &mut cols,
        );
        dgemm(
            cin, kk, n_in, 1.0,
            ker, kk as isize, 1,
            &cols, n_in as isize, 1,
            1.0,
            &mut d_inp[bi * cin * n_in..(bi + 1) * cin * n_in],
            n_in as isize, 1,
        );
    }
}

/// d_ker += gradient through [`conv_transpose2d_fwd`]: per sample,
/// inp · im2col(d_out)ᵀ, accumulated over the batch.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_bwd_kernel(
    inp: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_out: &[f64],
    d_ker: &mut [f64],
) {
    let oh = conv_transpose_out_dim(h, kh, stride, pad);
    let ow = conv_transpose_out_dim(w, kw, stride, pad);
    let (kk, n_in, n_out) = (cout * kh * kw, h * w, oh * ow);
    let mut cols = vec![0.0; kk * n_in];
    for bi in 0..bsz {
        im2col(
            &d_out[bi * cout * n_out..(bi + 1) * cout * n_out],
            cout, oh, ow, kh, kw, stride, pad, h, w, &mut cols,
        );
        dgemm(
            cin, n_in, kk, 1.0,
            &inp[bi * cin * n_in..(bi + 1) * cin * n_in], n_in as isize, 1,
            &cols, 1, n_in as isize,
            1.0, d_ker, kk as isize, 1,
        );
    }
}

pub fn linear_fwd(x: &[f64], bsz: usize, d: usize, wgt: &[f64], k: usize, bias: &[f64], out: &mut [f64]) {
    for bi in 0..bsz {
        let orow = bi * k;
        out[orow..orow + k].copy_from_slice(bias);
        let xrow = bi * d;
        for di in 0..d {
            let xv = x[xrow + di];
            if xv == 0.0 {
                continue;
            }
            let wrow = di * k;
            for ki in 0..k {
                out[orow + ki] += xv * wgt[wrow + ki];
            }
        }
    }
}

pub fn linear_bwd_input(wgt: &[f64], bsz: usize, d: usize, k: usize, d_out: &[f64], d_x: &mut [f64]) {
    for bi in 0..bsz {
        let grow = bi * k;
        let xrow = bi * d;
        for di in 0..d {
            let wrow = di * k;
            let mut s = 0.0;
            for ki in 0..k {
                s += d_out[grow + ki] * wgt[wrow + ki];
            }
            d_x[xrow + di] += s;
        }
    }
}

pub fn linear_bwd_weight(x: &[f64], bsz: usize, d: usize, k: usize, d_out: &[f64], d_w: &mut [f64]) {
    for bi in 0..bsz {
        let grow = bi * k;
        let xrow = bi * d;
        for di in 0..d {
            let xv = x[xrow + di];
            if xv == 0.0 {
                continue;
            }
            let wrow = di * k;
            for ki in 0..k {
                d_w[wrow + ki] += xv * d_out[grow + ki];
            }
        }
    }
}

pub fn linear_bwd_bias(d_out: &[f64], bsz: usize, k: usize, d_b: &mut [f64]) {
    for bi in 0..bsz {
        for ki in 0..k {
            d_b[ki] += d_out[bi * k + ki];
        }
    }
}

/// 2x2 max pool, stride 2. Records the flat input index of each winner so
/// backward can scatter. Ties go to the earliest index in scan order.
pub fn max_pool2_fwd(
    inp: &[f64],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let oh = h / 2;
    let ow = w / 2;
    for bi in 0..bsz {
        for ci in 0..c {
            let iplane = (bi * c + ci) * h;
            let obase = ((bi * c + ci) * oh) * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = (iplane + 2 * oy) * w + 2 * ox;
                    let i01 = i00 + 1;
                    let i10 = i00 + w;
                    let i11 = i10 + 1;
                    let mut best = i00;
                    if inp[i01] > inp[best] {
                        best = i01;
                    }
                    if inp[i10] > inp[best] {
                        best = i10;
                    }
                    if inp[i11] > inp[best] {
                        best = i11;
                    }
                    out[obase + oy * ow + ox] = inp[best];
                    argmax[obase + oy * ow + ox] = best as u32;
                }
            }
        }
    }
}

pub fn max_pool2_bwd(argmax: &[u32], d_out: &[f64], d_inp: &mut [f64]) {
    for (i, &g) in d_out.iter().enumerate() {
        d_inp[argmax[i] as usize] += g;
    }
}

/// Global spatial mean: [B,C,H,W] -> [B,C].
pub fn mean_pool_spatial_fwd(inp: &[f64], bsz: usize, c: usize, h: usize, w: usize, out: &mut [f64]) {
    let n = (h * w) as f64;
    for bi in 0..bsz {
        for ci in 0..c {
            let base = ((bi * c + ci) * h) * w;
            let mut s = 0.0;
            for v in &inp[base..base + h * w] {
                s += v;
            }
            out[bi * c + ci] = s / n;
        }
    }
}

pub fn mean_pool_spatial_bwd(d_out: &[f64], bsz: usize, c: usize, h: usize, w: usize, d_inp: &mut [f64]) {
    let scale = 1.0 / (h * w) as f64;
    for bi in 0..bsz {
        for ci in 0..c {
            let g = d_out[bi * c + ci] * scale;
            let base = ((bi * c + ci) * h) * w;
            for v in &mut d_inp[base..base + h * w] {
                *v += g;
            }
        }
    }
}

/// Row-wise temperature softmax with max subtraction: p = softmax(z / gamma).
pub fn softmax_temp_rows(logits: &[f64], rows: usize, cols: usize, gamma: f64, out: &mut [f64]) {
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &z) in orow.iter_mut().zip(row) {
            let e = ((z - m) / gamma).exp();
            *o = e;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
}

/// Row-wise log softmax with temperature, fused through log-sum-exp so no
/// probability is ever materialized before the log.
pub fn log_softmax_temp_rows(logits: &[f64], rows: usize, cols: usize, gamma: f64, out: &mut [f64]) {
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += ((z - m) / gamma).exp();
        }
        let lse = denom.ln();
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - m) / gamma - lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent scalar oracle for conv2d: per output element, iterate the
    // definition directly with explicit bounds checks.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_oracle(
        inp: &[f64],
        bsz: usize,
        cin: usize,
        h: usize,
        w: usize,
        ker: &[f64],
        cout: usize,
        kh: usize,
        kw: usize,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(w, kw, stride, pad);
        let mut out = vec![0.0; bsz * cout * oh * ow];
        for bi in 0..bsz {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize * stride as isize + ky as isize - pad as isize;
                                    let ix = ox as isize * stride as isize + kx as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = inp[((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = ker[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    // Independent scatter-form oracle for transposed conv: every input pixel
    // stamps the kernel into the output.
    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_oracle(
        inp: &[f64],
        bsz: usize,
        cin: usize,
        h: usize,
        w: usize,
        ker: &[f64],
        cout: usize,
        kh: usize,
        kw: usize,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = conv_transpose_out_dim(h, kh, stride, pad);
        let ow = conv_transpose_out_dim(w, kw, stride, pad);
        let mut out = vec![0.0; bsz * cout * oh * ow];
        for bi in 0..bsz {
            for co in 0..cout {
                for v in out[((bi * cout + co) * oh) * ow..((bi * cout + co) * oh) * ow + oh * ow].iter_mut() {
                    *v = bias[co];
                }
            }
        }
        for bi in 0..bsz {
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let iv = inp[((bi * cin + ci) * h + iy) * w + ix];
                        for co in 0..cout {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let oy = iy as isize * stride as isize - pad as isize + ky as isize;
                                    let ox = ix as isize * stride as isize - pad as isize + kx as isize;
                                    if oy < 0 || oy >= oh as isize || ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    let kv = ker[((ci * cout + co) * kh + ky) * kw + kx];
                                    out[((bi * cout + co) * oh + oy as usize) * ow + ox as usize] += iv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn fill_seq(n: usize, scale: f64, offset: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + offset).sin() * scale).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "index {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv2d_matches_oracle_over_configs() {
        let configs = [
            (2usize, 3usize, 5usize, 6usize, 4usize, 3usize, 3usize, 1usize, 1usize),
            (1, 2, 7, 7, 3, 3, 3, 2, 1),
            (2, 1, 6, 5, 2, 2, 2, 2, 0),
            (1, 4, 4, 4, 5, 1, 1, 1, 0),
            (1, 2, 5, 5, 2, 5, 5, 1, 2),
        ];
        for (ci, &(bsz, cin, h, w, cout, kh, kw, stride, pad)) in configs.iter().enumerate() {
            let inp = fill_seq(bsz * cin * h * w, 1.0, ci as f64);
            let ker = fill_seq(cout * cin * kh * kw, 0.5, ci as f64 + 0.3);
            let bias = fill_seq(cout, 0.2, ci as f64 + 0.7);
            let oh = conv_out_dim(h, kh, stride, pad);
            let ow = conv_out_dim(w, kw, stride, pad);
            let mut out = vec![0.0; bsz * cout * oh * ow];
            conv2d_fwd(&inp, bsz, cin, h, w, &ker, cout, kh, kw, &bias, stride, pad, &mut out);
            let want = conv2d_oracle(&inp, bsz, cin, h, w, &ker, cout, kh, kw, &bias, stride, pad);
            assert_close(&out, &want, 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        // 1x1x3x3 input, single 3x3 kernel with a centered 1, pad 1.
        let inp: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut ker = vec![0.0; 9];
        ker[4] = 1.0;
        let mut out = vec![0.0; 9];
        conv2d_fwd(&inp, 1, 1, 3, 3, &ker, 1, 3, 3, &[0.0], 1, 1, &mut out);
        assert_eq!(out, inp);
    }

    #[test]
    fn conv2d_box_kernel_hand_values() {
        // All-ones 3x3 kernel over a 3x3 ramp with pad 1: each output is the
        // sum of the 3x3 neighborhood. Corner (0,0) sees 1+2+4+5 = 12.
        let inp: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let ker = vec![1.0; 9];
        let mut out = vec![0.0; 9];
        conv2d_fwd(&inp, 1, 1, 3, 3, &ker, 1, 3, 3, &[0.0], 1, 1, &mut out);
        assert_eq!(out[0], 12.0);
        assert_eq!(out[4], 45.0);
        assert_eq!(out[8], 5.0 + 6.0 + 8.0 + 9.0);
    }

    #[test]
    fn conv_transpose2d_matches_oracle_over_configs() {
        let configs = [
            (2usize, 3usize, 4usize, 4usize, 2usize, 4usize, 4usize, 2usize, 1usize),
            (1, 2, 3, 5, 3, 3, 3, 1, 1),
            (1, 1, 4, 4, 2, 2, 2, 2, 0),
            (2, 2, 3, 3, 1, 4, 4, 2, 1),
        ];
        for (ci, &(bsz, cin, h, w, cout, kh, kw, stride, pad)) in configs.iter().enumerate() {
            let inp = fill_seq(bsz * cin * h * w, 1.0, ci as f64);
            let ker = fill_seq(cin * cout * kh * kw, 0.5, ci as f64 + 0.4);
            let bias = fill_seq(cout, 0.3, ci as f64 + 0.9);
            let oh = conv_transpose_out_dim(h, kh, stride, pad);
            let ow = conv_transpose_out_dim(w, kw, stride, pad);
            let mut out = vec![0.0; bsz * cout * oh * ow];
            conv_transpose2d_fwd(&inp, bsz, cin, h, w, &ker, cout, kh, kw, &bias, stride, pad, &mut out);
            let want = conv_transpose2d_oracle(&inp, bsz, cin, h, w, &ker, cout, kh, kw, &bias, stride, pad);
            assert_close(&out, &want, 1e-12);
        }
    }

    #[test]
    fn conv_transpose2d_doubles_spatial_size_with_k4_s2_p1() {
        assert_eq!(conv_transpose_out_dim(4, 4, 2, 1), 8);
        assert_eq!(conv_transpose_out_dim(8, 4, 2, 1), 16);
        assert_eq!(conv_transpose_out_dim(16, 4, 2, 1), 32);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let (bsz, d, k) = (3, 7, 4);
        let x = fill_seq(bsz * d, 1.0, 0.1);
        let w = fill_seq(d * k, 0.5, 0.2);
        let b = fill_seq(k, 0.1, 0.5);
        let mut out = vec![0.0; bsz * k];
        linear_fwd(&x, bsz, d, &w, k, &b, &mut out);
        let mut want = vec![0.0; bsz * k];
        for bi in 0..bsz {
            for ki in 0..k {
                let mut acc = b[ki];
                for di in 0..d {
                    acc += x[bi * d + di] * w[di * k + ki];
                }
                want[bi * k + ki] = acc;
            }
        }
        assert_close(&out, &want, 1e-12);
    }

    #[test]
    fn max_pool2_picks_max_and_records_index() {
        let inp = vec![
            1.0, 5.0, 2.0, 0.0, //
            3.0, 4.0, 1.0, 6.0, //
            0.0, 0.0, 9.0, 8.0, //
            7.0, 2.0, 3.0, 1.0,
        ];
        let mut out = vec![0.0; 4];
        let mut arg = vec![0u32; 4];
        max_pool2_fwd(&inp, 1, 1, 4, 4, &mut out, &mut arg);
        assert_eq!(out, vec![5.0, 6.0, 7.0, 9.0]);
        assert_eq!(arg, vec![1, 7, 12, 10]);

        let mut d_inp = vec![0.0; 16];
        max_pool2_bwd(&arg, &[1.0, 2.0, 3.0, 4.0], &mut d_inp);
        assert_eq!(d_inp[1], 1.0);
        assert_eq!(d_inp[7], 2.0);
        assert_eq!(d_inp[12], 3.0);
        assert_eq!(d_inp[10], 4.0);
        assert_eq!(d_inp.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn mean_pool_spatial_hand_values() {
        let inp = vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let mut out = vec![0.0; 2];
        mean_pool_spatial_fwd(&inp, 1, 2, 2, 2, &mut out);
        assert_eq!(out, vec![2.5, 25.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_keep_argmax() {
        let logits = vec![2.0, 1.0, 0.0, -1.0, 3.0, 0.5];
        for gamma in [0.25, 1.0, 4.0] {
            let mut p = vec![0.0; 6];
            softmax_temp_rows(&logits, 2, 3, gamma, &mut p);
            for r in 0..2 {
                let row = &p[r * 3..(r + 1) * 3];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0));
            }
            assert_eq!(argmax(&p[0..3]), 0);
            assert_eq!(argmax(&p[3..6]), 1);
        }
    }

    #[test]
    fn lower_temperature_sharpens() {
        let logits = vec![2.0, 1.0, 0.0];
        let mut p1 = vec![0.0; 3];
        let mut p_half = vec![0.0; 3];
        softmax_temp_rows(&logits, 1, 3, 1.0, &mut p1);
        softmax_temp_rows(&logits, 1, 3, 0.5, &mut p_half);
        assert!(p_half[0] > p1[0], "{} vs {}", p_half[0], p1[0]);
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let logits = vec![0.7; 5];
        let mut p = vec![0.0; 5];
        softmax_temp_rows(&logits, 1, 5, 2.3, &mut p);
        for &v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax() {
        let logits = vec![0.3, -1.2, 2.2, 0.0, 0.1, -0.4];
        let mut p = vec![0.0; 6];
        let mut lp = vec![0.0; 6];
        softmax_temp_rows(&logits, 2, 3, 0.7, &mut p);
        log_softmax_temp_rows(&logits, 2, 3, 0.7, &mut lp);
        for i in 0..6 {
            assert!((lp[i] - p[i].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_survives_extreme_logits() {
        let logits = vec![1000.0, 0.0, -1000.0];
        let mut lp = vec![0.0; 3];
        log_softmax_temp_rows(&logits, 1, 3, 1.0, &mut lp);
        assert!(lp.iter().all(|v| v.is_finite()));
        assert!((lp[0] - 0.0).abs() < 1e-12);
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }
}
