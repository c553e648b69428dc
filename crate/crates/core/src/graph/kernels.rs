//! Array kernels behind the graph primitives.
//!
//! Plain loops over row-major buffers. Convolutions keep the channel axis
//! innermost so the hot loops run over contiguous memory.

/// TF-style SAME padding: output size ceil(n/stride), zero padding split
/// with the extra cell at the end.
pub fn same_padding(n: usize, kernel: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let eff = (kernel - 1) * dilation + 1;
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + eff).saturating_sub(n);
    (out, total / 2)
}

/// conv2d, NHWC input, (kh, kw, ci, co) weight, (co,) bias.
pub fn conv2d_forward(
    input: &[f64],
    (b, h, w, ci): (usize, usize, usize, usize),
    weight: &[f64],
    (kh, kw, co): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, pad_h) = same_padding(h, kh, stride, dilation);
    let (ow, pad_w) = same_padding(w, kw, stride, dilation);
    let mut out = vec![0.0; b * oh * ow * co];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[((bi * oh + oy) * ow + ox) * co..][..co];
                orow.copy_from_slice(bias);
                for ky in 0..kh {
                    let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx * dilation) as isize - pad_w as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let irow = &input[((bi * h + iy as usize) * w + ix as usize) * ci..][..ci];
                        let wbase = (ky * kw + kx) * ci * co;
                        for (c, &v) in irow.iter().enumerate() {
                            let wrow = &weight[wbase + c * co..][..co];
                            for (o, wv) in wrow.iter().enumerate() {
                                orow[o] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, vec![b, oh, ow, co])
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    (b, h, w, ci): (usize, usize, usize, usize),
    weight: &[f64],
    (kh, kw, co): (usize, usize, usize),
    stride: usize,
    dilation: usize,
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (oh, pad_h) = same_padding(h, kh, stride, dilation);
    let (ow, pad_w) = same_padding(w, kw, stride, dilation);
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    let mut grad_b = grad_b;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &grad_out[((bi * oh + oy) * ow + ox) * co..][..co];
                if let Some(gb) = grad_b.as_deref_mut() {
                    for (o, g) in grow.iter().enumerate() {
                        gb[o] += g;
                    }
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx * dilation) as isize - pad_w as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let ibase = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let wbase = (ky * kw + kx) * ci * co;
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let girow = &mut gi[ibase..][..ci];
                            for (c, giv) in girow.iter_mut().enumerate() {
                                let wrow = &weight[wbase + c * co..][..co];
                                let mut acc = 0.0;
                                for (o, wv) in wrow.iter().enumerate() {
                                    acc += grow[o] * wv;
                                }
                                *giv += acc;
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            let irow = &input[ibase..][..ci];
                            for (c, &v) in irow.iter().enumerate() {
                                let gwrow = &mut gw[wbase + c * co..][..co];
                                for (o, g) in grow.iter().enumerate() {
                                    gwrow[o] += v * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise conv2d, stride 1: weight (kh, kw, c), one filter per channel.
pub fn depthwise_forward(
    input: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    weight: &[f64],
    (kh, kw): (usize, usize),
    dilation: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, pad_h) = same_padding(h, kh, 1, dilation);
    let (ow, pad_w) = same_padding(w, kw, 1, dilation);
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[((bi * oh + oy) * ow + ox) * c..][..c];
                for ky in 0..kh {
                    let iy = (oy + ky * dilation) as isize - pad_h as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx * dilation) as isize - pad_w as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let irow = &input[((bi * h + iy as usize) * w + ix as usize) * c..][..c];
                        let wrow = &weight[(ky * kw + kx) * c..][..c];
                        for ch in 0..c {
                            orow[ch] += irow[ch] * wrow[ch];
                        }
                    }
                }
            }
        }
    }
    (out, vec![b, oh, ow, c])
}

pub fn depthwise_backward(
    grad_out: &[f64],
    input: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    weight: &[f64],
    (kh, kw): (usize, usize),
    dilation: usize,
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
) {
    let (oh, pad_h) = same_padding(h, kh, 1, dilation);
    let (ow, pad_w) = same_padding(w, kw, 1, dilation);
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &grad_out[((bi * oh + oy) * ow + ox) * c..][..c];
                for ky in 0..kh {
                    let iy = (oy + ky * dilation) as isize - pad_h as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx * dilation) as isize - pad_w as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let ibase = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let wbase = (ky * kw + kx) * c;
                        if let Some(gi) = grad_in.as_deref_mut() {
                            for ch in 0..c {
                                gi[ibase + ch] += grow[ch] * weight[wbase + ch];
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            for ch in 0..c {
                                gw[wbase + ch] += grow[ch] * input[ibase + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed conv with a 2x2 kernel and stride 2: exact spatial doubling.
/// Weight layout (2, 2, ci, co).
pub fn conv_transpose2_forward(
    input: &[f64],
    (b, h, w, ci): (usize, usize, usize, usize),
    weight: &[f64],
    co: usize,
    bias: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; b * oh * ow * co];
    for (i, chunk) in out.chunks_exact_mut(co).enumerate() {
        chunk.copy_from_slice(bias);
        let _ = i;
    }
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let irow = &input[((bi * h + y) * w + x) * ci..][..ci];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let orow =
                            &mut out[((bi * oh + 2 * y + dy) * ow + 2 * x + dx) * co..][..co];
                        let wbase = (dy * 2 + dx) * ci * co;
                        for (c, &v) in irow.iter().enumerate() {
                            let wrow = &weight[wbase + c * co..][..co];
                            for (o, wv) in wrow.iter().enumerate() {
                                orow[o] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, vec![b, oh, ow, co])
}

pub fn conv_transpose2_backward(
    grad_out: &[f64],
    input: &[f64],
    (b, h, w, ci): (usize, usize, usize, usize),
    weight: &[f64],
    co: usize,
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let (oh, ow) = (h * 2, w * 2);
    if let Some(gb) = grad_b {
        for chunk in grad_out.chunks_exact(co) {
            for (o, g) in chunk.iter().enumerate() {
                gb[o] += g;
            }
        }
    }
    let mut grad_in = grad_in;
    let mut grad_w = grad_w;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let ibase = ((bi * h + y) * w + x) * ci;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let grow =
                            &grad_out[((bi * oh + 2 * y + dy) * ow + 2 * x + dx) * co..][..co];
                        let wbase = (dy * 2 + dx) * ci * co;
                        if let Some(gi) = grad_in.as_deref_mut() {
                            for c in 0..ci {
                                let wrow = &weight[wbase + c * co..][..co];
                                let mut acc = 0.0;
                                for (o, wv) in wrow.iter().enumerate() {
                                    acc += grow[o] * wv;
                                }
                                gi[ibase + c] += acc;
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            for c in 0..ci {
                                let v = input[ibase + c];
                                let gwrow = &mut gw[wbase + c * co..][..co];
                                for (o, g) in grow.iter().enumerate() {
                                    gwrow[o] += v * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        let arow = &a[i * k..][..k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..][..n];
            for (j, bv) in brow.iter().enumerate() {
                orow[j] += av * bv;
            }
        }
    }
    out
}

/// dA = G B^T, dB = A^T G for C = A B.
pub fn matmul_backward(
    grad_out: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    grad_a: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    if let Some(ga) = grad_a {
        for i in 0..m {
            let grow = &grad_out[i * n..][..n];
            let garow = &mut ga[i * k..][..k];
            for (p, gav) in garow.iter_mut().enumerate() {
                let brow = &b[p * n..][..n];
                let mut acc = 0.0;
                for (j, bv) in brow.iter().enumerate() {
                    acc += grow[j] * bv;
                }
                *gav += acc;
            }
        }
    }
    if let Some(gb) = grad_b {
        for i in 0..m {
            let grow = &grad_out[i * n..][..n];
            let arow = &a[i * k..][..k];
            for (p, &av) in arow.iter().enumerate() {
                let gbrow = &mut gb[p * n..][..n];
                for (j, g) in grow.iter().enumerate() {
                    gbrow[j] += av * g;
                }
            }
        }
    }
}

/// Nearest-neighbour upsample by an integer factor on NHWC.
pub fn upsample_nearest_forward(
    input: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    f: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let irow = &input[((bi * h + oy / f) * w + ox / f) * c..][..c];
                out[((bi * oh + oy) * ow + ox) * c..][..c].copy_from_slice(irow);
            }
        }
    }
    (out, vec![b, oh, ow, c])
}

pub fn upsample_nearest_backward(
    grad_out: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    f: usize,
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h * f, w * f);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &grad_out[((bi * oh + oy) * ow + ox) * c..][..c];
                let girow = &mut grad_in[((bi * h + oy / f) * w + ox / f) * c..][..c];
                for ch in 0..c {
                    girow[ch] += grow[ch];
                }
            }
        }
    }
}

/// Source coordinate and interpolation weights for bilinear upsampling with
/// the half-pixel convention.
fn bilinear_taps(o: usize, f: usize, n: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / f as f64 - 0.5;
    let src = src.clamp(0.0, (n - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, src - lo as f64)
}

pub fn upsample_bilinear_forward(
    input: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    f: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for oy in 0..oh {
            let (y0, y1, ty) = bilinear_taps(oy, f, h);
            for ox in 0..ow {
                let (x0, x1, tx) = bilinear_taps(ox, f, w);
                let orow = &mut out[((bi * oh + oy) * ow + ox) * c..][..c];
                let r00 = &input[((bi * h + y0) * w + x0) * c..][..c];
                let r01 = &input[((bi * h + y0) * w + x1) * c..][..c];
                let r10 = &input[((bi * h + y1) * w + x0) * c..][..c];
                let r11 = &input[((bi * h + y1) * w + x1) * c..][..c];
                for ch in 0..c {
                    let top = r00[ch] * (1.0 - tx) + r01[ch] * tx;
                    let bot = r10[ch] * (1.0 - tx) + r11[ch] * tx;
                    orow[ch] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    (out, vec![b, oh, ow, c])
}

pub fn upsample_bilinear_backward(
    grad_out: &[f64],
    (b, h, w, c): (usize, usize, usize, usize),
    f: usize,
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h * f, w * f);
    for bi in 0..b {
        for oy in 0..oh {
            let (y0, y1, ty) = bilinear_taps(oy, f, h);
            for ox in 0..ow {
                let (x0, x1, tx) = bilinear_taps(ox, f, w);
                let grow = &grad_out[((bi * oh + oy) * ow + ox) * c..][..c];
                for ch in 0..c {
                    let g = grow[ch];
                    grad_in[((bi * h + y0) * w + x0) * c + ch] += g * (1.0 - tx) * (1.0 - ty);
                    grad_in[((bi * h + y0) * w + x1) * c + ch] += g * tx * (1.0 - ty);
                    grad_in[((bi * h + y1) * w + x0) * c + ch] += g * (1.0 - tx) * ty;
                    grad_in[((bi * h + y1) * w + x1) * c + ch] += g * tx * ty;
                }
            }
        }
    }
}

/// Shape after reducing `axes` (must be sorted, unique).
pub fn reduced_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.len());
    for (d, &s) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(s);
        }
    }
    out
}

/// Sum over `axes`; output laid out as the keepdims shape (the caller may
/// reinterpret it squeezed, the buffer is identical).
pub fn reduce_sum_forward(input: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let keep = reduced_shape(shape, axes, true);
    let out_len: usize = keep.iter().product();
    let mut out = vec![0.0; out_len];
    let out_strides = crate::tensor::strides(&keep);
    let mut coords = vec![0usize; shape.len()];
    for &v in input.iter() {
        let mut off = 0;
        for (d, &cd) in coords.iter().enumerate() {
            if keep[d] != 1 {
                off += cd * out_strides[d];
            }
        }
        out[off] += v;
        // odometer increment
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Scatter `grad_out` (keepdims layout) back over the input, scaled.
pub fn reduce_backward(
    grad_out: &[f64],
    shape: &[usize],
    axes: &[usize],
    scale: f64,
    grad_in: &mut [f64],
) {
    let keep = reduced_shape(shape, axes, true);
    let out_strides = crate::tensor::strides(&keep);
    let mut coords = vec![0usize; shape.len()];
    for gi in grad_in.iter_mut() {
        let mut off = 0;
        for (d, &cd) in coords.iter().enumerate() {
            if keep[d] != 1 {
                off += cd * out_strides[d];
            }
        }
        *gi += grad_out[off] * scale;
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

/// Expand `input` to `out_shape` (right-aligned, size-1 dims repeat).
pub fn broadcast_forward(input: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let pad = out_shape.len() - in_shape.len();
    let mut padded = vec![1usize; out_shape.len()];
    padded[pad..].copy_from_slice(in_shape);
    let in_strides = crate::tensor::strides(&padded);
    let out_len: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_len];
    let mut coords = vec![0usize; out_shape.len()];
    for o in out.iter_mut() {
        let mut off = 0;
        for (d, &cd) in coords.iter().enumerate() {
            if padded[d] != 1 {
                off += cd * in_strides[d];
            }
        }
        *o = input[off];
        for d in (0..out_shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad_out` over the broadcast dims, back into the input layout.
pub fn broadcast_backward(
    grad_out: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    grad_in: &mut [f64],
) {
    let pad = out_shape.len() - in_shape.len();
    let mut padded = vec![1usize; out_shape.len()];
    padded[pad..].copy_from_slice(in_shape);
    let in_strides = crate::tensor::strides(&padded);
    let mut coords = vec![0usize; out_shape.len()];
    for &g in grad_out.iter() {
        let mut off = 0;
        for (d, &cd) in coords.iter().enumerate() {
            if padded[d] != 1 {
                off += cd * in_strides[d];
            }
        }
        grad_in[off] += g;
        for d in (0..out_shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

/// Stable softmax over the last axis.
pub fn softmax_forward(input: &[f64], last: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (row, orow) in input.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// dz = y * (g - sum(g * y)) per row.
pub fn softmax_backward(grad_out: &[f64], out: &[f64], last: usize, grad_in: &mut [f64]) {
    for ((grow, orow), girow) in grad_out
        .chunks_exact(last)
        .zip(out.chunks_exact(last))
        .zip(grad_in.chunks_exact_mut(last))
    {
        let dot: f64 = grow.iter().zip(orow).map(|(g, y)| g * y).sum();
        for ((gi, &g), &y) in girow.iter_mut().zip(grow).zip(orow) {
            *gi += y * (g - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_expectations() {
        assert_eq!(same_padding(8, 3, 1, 1), (8, 1));
        assert_eq!(same_padding(8, 3, 2, 1), (4, 0)); // total pad 1, begin 0
        assert_eq!(same_padding(7, 3, 1, 1), (7, 1));
        assert_eq!(same_padding(8, 3, 1, 4), (8, 4)); // effective kernel 9
        assert_eq!(same_padding(4, 1, 1, 1), (4, 0));
    }

    #[test]
    fn matmul_known_product() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_forward(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn reduce_sum_axis0() {
        // shape (2,3), sum over axis 0 -> (1,3) buffer
        let x = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_sum_forward(&x, &[2, 3], &[0]), vec![11.0, 22.0, 33.0]);
        assert_eq!(reduce_sum_forward(&x, &[2, 3], &[1]), vec![6.0, 60.0]);
        assert_eq!(reduce_sum_forward(&x, &[2, 3], &[0, 1]), vec![66.0]);
    }

    #[test]
    fn broadcast_repeats_rows() {
        // (3,) -> (2,3)
        let x = [1.0, 2.0, 3.0];
        assert_eq!(
            broadcast_forward(&x, &[3], &[2, 3]),
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
        // (2,1) -> (2,3)
        let y = [5.0, 9.0];
        assert_eq!(
            broadcast_forward(&y, &[2, 1], &[2, 3]),
            vec![5.0, 5.0, 5.0, 9.0, 9.0, 9.0]
        );
    }

    #[test]
    fn broadcast_backward_sums() {
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut gi = vec![0.0; 3];
        broadcast_backward(&g, &[3], &[2, 3], &mut gi);
        assert_eq!(gi, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [0.3, -1.2, 2.0, 0.0, 0.0, 0.0];
        let y = softmax_forward(&x, 3);
        for row in y.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
