//! Raw slice kernels shared by the graph's forward and backward rules.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + k - padding` is inside `[0, len)`.
    #[inline]
    fn valid_range(out: usize, len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
        // smallest ox with ox*stride + k >= padding
        let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
        // largest ox with ox*stride + k - padding <= len - 1
        let hi_num = len + padding - 1;
        let hi = if hi_num < k { return (0, 0) } else { (hi_num - k) / stride + 1 };
        (lo.min(out), hi.min(out))
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

pub(crate) fn matvec(a: &[f64], x: &[f64], m: usize, k: usize) -> Vec<f64> {
    (0..m)
        .map(|i| {
            a[i * k..(i + 1) * k]
                .iter()
                .zip(x)
                .map(|(&w, &v)| w * v)
                .sum()
        })
        .collect()
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane];
    for o in 0..g.c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for c in 0..g.c_in {
            let in_plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = ConvGeom::valid_range(g.h_out, g.h, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let wv = kernel[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = ConvGeom::valid_range(g.w_out, g.w, kx, g.stride, g.padding);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.padding;
                            for (o, &v) in out_row[x0..x1].iter_mut().zip(&in_row[ix0..ix0 + (x1 - x0)]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution into the optional output buffers.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    mut d_input: Option<&mut [f64]>,
    mut d_kernel: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    let plane = g.h_out * g.w_out;
    if let Some(db) = d_bias {
        for o in 0..g.c_out {
            db[o] += grad_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
    if d_input.is_none() && d_kernel.is_none() {
        return;
    }
    for o in 0..g.c_out {
        let g_plane = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..g.c_in {
            let in_off = c * g.h * g.w;
            for ky in 0..g.kh {
                let (y0, y1) = ConvGeom::valid_range(g.h_out, g.h, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let k_idx = ((o * g.c_in + c) * g.kh + ky) * g.kw + kx;
                    let wv = kernel[k_idx];
                    let (x0, x1) = ConvGeom::valid_range(g.w_out, g.w, kx, g.stride, g.padding);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let row_off = in_off + iy * g.w;
                        let g_row = &g_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in x0..x1 {
                            let ix = row_off + ox * g.stride + kx - g.padding;
                            let gv = g_row[ox];
                            acc += gv * input[ix];
                            if let Some(di) = d_input.as_deref_mut() {
                                di[ix] += wv * gv;
                            }
                        }
                    }
                    if let Some(dk) = d_kernel.as_deref_mut() {
                        dk[k_idx] += acc;
                    }
                }
            }
        }
    }
}

/// Max pooling; returns the pooled values and the flat input index that won each window.
/// Padded cells act as negative infinity. Ties go to the first index in row-major scan order.
pub(crate) fn maxpool_forward(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(channels * h_out * w_out);
    let mut argmax = Vec::with_capacity(channels * h_out * w_out);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..window {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = input[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_padding() {
        // len 4, pad 1, kernel offset 0: ox=0 reads ix=-1 (invalid)
        assert_eq!(ConvGeom::valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(ConvGeom::valid_range(4, 4, 2, 1, 1), (0, 3));
        assert_eq!(ConvGeom::valid_range(4, 4, 1, 1, 1), (0, 4));
        // stride 2
        assert_eq!(ConvGeom::valid_range(2, 4, 0, 2, 1), (1, 2));
    }

    #[test]
    fn matmul_small() {
        assert_eq!(matmul(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1), vec![11.0]);
        assert_eq!(matvec(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2), vec![3.0, 7.0]);
    }
}
