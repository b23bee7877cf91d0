//! Dense layer primitives with hand-derived backward passes.
//!
//! Feature maps are row-major CHW `f64` buffers. Convolutions use zero
//! padding so spatial size is preserved; weights are laid out
//! `[out_ch][in_ch][ky][kx]`.

pub const LEAKY_SLOPE: f64 = 0.2;

/// 3x3 same-padding convolution.
pub fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(weight.len(), c_out * c_in * 9);
    let mut out = vec![0.0; c_out * h * w];
    for oc in 0..c_out {
        let o_base = oc * h * w;
        out[o_base..o_base + h * w].fill(bias[oc]);
        for ic in 0..c_in {
            let i_base = ic * h * w;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[((oc * c_in + ic) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // output row y reads input row y + ky - 1
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = h - (ky.saturating_sub(1)).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = w - (kx.saturating_sub(1)).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = o_base + y * w;
                        let istart = i_base + iy * w + x_lo + kx - 1;
                        let o = &mut out[orow + x_lo..orow + x_hi];
                        let i = &input[istart..istart + (x_hi - x_lo)];
                        for (ov, iv) in o.iter_mut().zip(i) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3_forward`]; returns (d_input, d_weight, d_bias).
pub fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_input = vec![0.0; c_in * h * w];
    let mut d_weight = vec![0.0; c_out * c_in * 9];
    let mut d_bias = vec![0.0; c_out];
    for oc in 0..c_out {
        let o_base = oc * h * w;
        d_bias[oc] = grad_out[o_base..o_base + h * w].iter().sum();
        for ic in 0..c_in {
            let i_base = ic * h * w;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let widx = ((oc * c_in + ic) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut dw = 0.0;
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = h - (ky.saturating_sub(1)).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = w - (kx.saturating_sub(1)).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = o_base + y * w;
                        let istart = i_base + iy * w + x_lo + kx - 1;
                        let g = &grad_out[orow + x_lo..orow + x_hi];
                        let i = &input[istart..istart + (x_hi - x_lo)];
                        let di = &mut d_input[istart..istart + (x_hi - x_lo)];
                        // two passes: the dot product is a serial reduction,
                        // the axpy vectorizes on its own
                        let mut acc = [0.0f64; 4];
                        let mut it_g = g.chunks_exact(4);
                        let mut it_i = i.chunks_exact(4);
                        for (cg, ci) in (&mut it_g).zip(&mut it_i) {
                            for k in 0..4 {
                                acc[k] += cg[k] * ci[k];
                            }
                        }
                        for (gv, iv) in it_g.remainder().iter().zip(it_i.remainder()) {
                            acc[0] += gv * iv;
                        }
                        dw += acc[0] + acc[1] + acc[2] + acc[3];
                        for (div, gv) in di.iter_mut().zip(g) {
                            *div += wv * gv;
                        }
                    }
                    d_weight[widx] = dw;
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// 1x1 convolution (per-pixel linear map across channels).
pub fn conv1x1_forward(
    input: &[f64],
    c_in: usize,
    hw: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * hw];
    for oc in 0..c_out {
        let o_base = oc * hw;
        out[o_base..o_base + hw].fill(bias[oc]);
        for ic in 0..c_in {
            let wv = weight[oc * c_in + ic];
            let i_base = ic * hw;
            for i in 0..hw {
                out[o_base + i] += wv * input[i_base + i];
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &[f64],
    c_in: usize,
    hw: usize,
    weight: &[f64],
    c_out: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_input = vec![0.0; c_in * hw];
    let mut d_weight = vec![0.0; c_out * c_in];
    let mut d_bias = vec![0.0; c_out];
    for oc in 0..c_out {
        let o_base = oc * hw;
        d_bias[oc] = grad_out[o_base..o_base + hw].iter().sum();
        for ic in 0..c_in {
            let wv = weight[oc * c_in + ic];
            let i_base = ic * hw;
            let mut dw = 0.0;
            for i in 0..hw {
                let g = grad_out[o_base + i];
                dw += g * input[i_base + i];
                d_input[i_base + i] += wv * g;
            }
            d_weight[oc * c_in + ic] = dw;
        }
    }
    (d_input, d_weight, d_bias)
}

/// Strided 3x3 convolution (stride 2, zero padding 1). Forward only; used by
/// the frozen encoder, which never receives gradients.
pub fn conv3x3_stride2_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; c_out * oh * ow];
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c_in {
                    for ky in 0..3usize {
                        let iy = (2 * oy + ky) as i64 - 1;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (2 * ox + kx) as i64 - 1;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += weight[((oc * c_in + ic) * 3 + ky) * 3 + kx]
                                * input[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn leaky_relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
        .collect()
}

/// `pre` is the pre-activation input of the forward pass.
pub fn leaky_relu_backward(pre: &[f64], grad_out: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v >= 0.0 { g } else { LEAKY_SLOPE * g })
        .collect()
}

/// 2x2 max pool; returns the pooled map and the flat input index of each max.
pub fn maxpool2_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ch * h + 2 * oy) * w + 2 * ox;
                let mut best = input[best_idx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
                arg[(ch * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    (out, arg, oh, ow)
}

pub fn maxpool2_backward(arg: &[usize], grad_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut d = vec![0.0; input_len];
    for (i, &g) in grad_out.iter().enumerate() {
        d[arg[i]] += g;
    }
    d
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2_forward(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let row = (ch * h + y / 2) * w;
            let orow = (ch * oh + y) * ow;
            for x in 0..ow {
                out[orow + x] = input[row + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let row = (ch * h + y / 2) * w;
            let orow = (ch * oh + y) * ow;
            for x in 0..ow {
                d[row + x / 2] += grad_out[orow + x];
            }
        }
    }
    d
}

/// y = W·x with W laid out `[out][in]`, no bias.
pub fn linear_forward(x: &[f64], weight: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n_out];
    for o in 0..n_out {
        let row = &weight[o * n_in..(o + 1) * n_in];
        y[o] = row.iter().zip(x).map(|(w, v)| w * v).sum();
    }
    y
}

/// Returns (d_x, d_weight).
pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    n_in: usize,
    n_out: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut d_x = vec![0.0; n_in];
    let mut d_w = vec![0.0; n_in * n_out];
    for o in 0..n_out {
        let g = grad_out[o];
        let row = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut d_w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            d_x[i] += row[i] * g;
            drow[i] = g * x[i];
        }
    }
    (d_x, d_w)
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Chain rule through softmax: given dL/dp, returns dL/dlogits for one row.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

pub fn softplus(x: f64) -> f64 {
    // overflow-safe: softplus(x) = max(x, 0) + ln(1 + exp(-|x|))
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
