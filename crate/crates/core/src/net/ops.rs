//! Per-sample kernels for the module types. Layouts are `[C, H, W]` row-major.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox * stride + kx - padding` lands inside the input.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= in_len - 1
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let k = g.kernel;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for o in 0..g.out_c {
        let out_plane = &mut out[o * plane_out..(o + 1) * plane_out];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..g.in_c {
            let in_plane = &input[i * plane_in..(i + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, g.out_w);
                    let w = weight[((o * g.in_c + i) * k + ky) * k + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let out_row = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.padding;
                            out_row[ox] += w * in_row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input gradient and, when given, the weight/bias gradients.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    mut param_grads: Option<(&mut [f64], &mut [f64])>,
) {
    let k = g.kernel;
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for o in 0..g.out_c {
        let gout_plane = &grad_out[o * plane_out..(o + 1) * plane_out];
        if let Some((_, gb)) = param_grads.as_mut() {
            gb[o] += gout_plane.iter().sum::<f64>();
        }
        for i in 0..g.in_c {
            let in_off = i * plane_in;
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, g.out_w);
                    let widx = ((o * g.in_c + i) * k + ky) * k + kx;
                    let w = weight[widx];
                    let mut gw = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = in_off + iy * g.in_w;
                        let gout_row = &gout_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.padding;
                            let go = gout_row[ox];
                            grad_in[row + ix] += w * go;
                            gw += go * input[row + ix];
                        }
                    }
                    if let Some((gw_buf, _)) = param_grads.as_mut() {
                        gw_buf[widx] += gw;
                    }
                }
            }
        }
    }
}

/// Non-overlapping pooling (`stride == window`); floor semantics on ragged edges.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub window: usize,
}

pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f64], out: &mut [f64]) {
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let v = input[(c * g.in_h + oy * g.window + dy) * g.in_w + ox * g.window + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(c * g.out_h + oy) * g.out_w + ox] = best;
            }
        }
    }
}

/// Routes each output gradient to the first maximal input in its window.
pub(crate) fn max_pool_backward(g: &PoolGeom, input: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let idx = (c * g.in_h + oy * g.window + dy) * g.in_w + ox * g.window + dx;
                        if input[idx] > best {
                            best = input[idx];
                            arg = idx;
                        }
                    }
                }
                grad_in[arg] += grad_out[(c * g.out_h + oy) * g.out_w + ox];
            }
        }
    }
}

pub(crate) fn avg_pool_forward(g: &PoolGeom, input: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for dy in 0..g.window {
                    let row = (c * g.in_h + oy * g.window + dy) * g.in_w + ox * g.window;
                    acc += input[row..row + g.window].iter().sum::<f64>();
                }
                out[(c * g.out_h + oy) * g.out_w + ox] = acc * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, grad_out: &[f64], grad_in: &mut [f64]) {
    let inv = 1.0 / (g.window * g.window) as f64;
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let go = grad_out[(c * g.out_h + oy) * g.out_w + ox] * inv;
                for dy in 0..g.window {
                    let row = (c * g.in_h + oy * g.window + dy) * g.in_w + ox * g.window;
                    grad_in[row..row + g.window].iter_mut().for_each(|v| *v += go);
                }
            }
        }
    }
}

/// `out = W x + b` with `W` stored `[out, in]`.
pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        *y = bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
) {
    let n_in = input.len();
    for (o, &go) in grad_out.iter().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        for (gi, w) in grad_in.iter_mut().zip(row) {
            *gi += w * go;
        }
    }
    if let Some((gw, gb)) = param_grads {
        for (o, &go) in grad_out.iter().enumerate() {
            gb[o] += go;
            for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                *g += go * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_c * g.out_h * g.out_w];
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias[o];
                    for i in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += weight[((o * g.in_c + i) * g.kernel + ky) * g.kernel + kx]
                                    * input[(i * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, padding, kernel) in &[(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1), (3, 2, 3)] {
            let (in_h, in_w) = (7, 6);
            let g = ConvGeom {
                in_c: 2,
                in_h,
                in_w,
                out_c: 3,
                out_h: (in_h + 2 * padding - kernel) / stride + 1,
                out_w: (in_w + 2 * padding - kernel) / stride + 1,
                kernel,
                stride,
                padding,
            };
            let input: Vec<f64> = (0..2 * in_h * in_w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let weight: Vec<f64> = (0..3 * 2 * kernel * kernel).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
            let bias = vec![0.1, -0.2, 0.3];
            let mut out = vec![0.0; g.out_c * g.out_h * g.out_w];
            conv_forward(&g, &input, &weight, &bias, &mut out);
            let expected = naive_conv(&g, &input, &weight, &bias);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_routes_to_first_max() {
        let g = PoolGeom { channels: 1, in_h: 2, in_w: 2, out_h: 1, out_w: 1, window: 2 };
        let input = [1.0, 3.0, 3.0, 0.0];
        let mut out = [0.0];
        max_pool_forward(&g, &input, &mut out);
        assert_eq!(out[0], 3.0);
        let mut gin = [0.0; 4];
        max_pool_backward(&g, &input, &[1.0], &mut gin);
        assert_eq!(gin, [0.0, 1.0, 0.0, 0.0]);
    }
}
