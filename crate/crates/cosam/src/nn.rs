//! Network primitives on the tape: 1x1 / 3x3 convolutions, batch norm,
//! affine layers, pooling and the broadcast gates used by the attention
//! modules.

use crate::error::{CosamError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pointwise convolution: `out[n,o,h,w] = sum_i w[o,i] * x[n,i,h,w] + b[o]`.
pub fn conv1x1(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    let bs = tape.shape(bias).to_vec();
    if xs.len() != 4 || ws.len() != 2 || bs.len() != 1 {
        return Err(CosamError::shape(format!(
            "conv1x1 ranks: x {xs:?}, w {ws:?}, b {bs:?}"
        )));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, wc) = (ws[0], ws[1]);
    if wc != c_in || bs[0] != c_out {
        return Err(CosamError::shape(format!(
            "conv1x1: x has {c_in} channels, weight {ws:?}, bias {bs:?}"
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * c_out * hw];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(weight).data();
        let bv = tape.value(bias).data();
        for ni in 0..n {
            for o in 0..c_out {
                let orow = &mut out[(ni * c_out + o) * hw..(ni * c_out + o + 1) * hw];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for i in 0..c_in {
                    let woi = wv[o * c_in + i];
                    if woi == 0.0 {
                        continue;
                    }
                    let xrow = &xv[(ni * c_in + i) * hw..(ni * c_in + i + 1) * hw];
                    for p in 0..hw {
                        orow[p] += woi * xrow[p];
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![n, c_out, h, w], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let wv = vals[weight.id].data();
            for ni in 0..n {
                for o in 0..c_out {
                    let grow = &g[(ni * c_out + o) * hw..(ni * c_out + o + 1) * hw];
                    let mut bsum = 0.0;
                    for p in 0..hw {
                        bsum += grow[p];
                    }
                    grads[bias.id][o] += bsum;
                    for i in 0..c_in {
                        let xrow = &xv[(ni * c_in + i) * hw..(ni * c_in + i + 1) * hw];
                        let woi = wv[o * c_in + i];
                        let mut wsum = 0.0;
                        let gxrow =
                            &mut grads[x.id][(ni * c_in + i) * hw..(ni * c_in + i + 1) * hw];
                        for p in 0..hw {
                            wsum += grow[p] * xrow[p];
                            gxrow[p] += woi * grow[p];
                        }
                        grads[weight.id][o * c_in + i] += wsum;
                    }
                }
            }
        })),
    ))
}

/// 3x3 convolution with padding 1 and stride 1 or 2. Only what the toy
/// backbone needs; COSAM/SRIM themselves use `conv1x1`.
pub fn conv3x3(tape: &mut Tape, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    let bs = tape.shape(bias).to_vec();
    if !(stride == 1 || stride == 2) {
        return Err(CosamError::arg(format!("conv3x3 stride {stride} not in {{1,2}}")));
    }
    if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || bs.len() != 1 {
        return Err(CosamError::shape(format!(
            "conv3x3 ranks: x {xs:?}, w {ws:?}, b {bs:?}"
        )));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, wc) = (ws[0], ws[1]);
    if wc != c_in || bs[0] != c_out {
        return Err(CosamError::shape(format!(
            "conv3x3: x has {c_in} channels, weight {ws:?}, bias {bs:?}"
        )));
    }
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    // Valid output range for one kernel offset: input index y*stride + k - 1
    // must land in [0, len). Precomputing the range removes all bounds tests
    // from the hot loops.
    let valid = move |k: usize, len: usize, olen: usize| -> (usize, usize) {
        let lo = if k == 0 { 1 } else { 0 };
        let hi = if k > len {
            0
        } else {
            ((len - k) / stride + 1).min(olen)
        };
        (lo, hi.max(lo))
    };
    let mut out = vec![0.0; n * c_out * oh * ow];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(weight).data();
        let bv = tape.value(bias).data();
        for ni in 0..n {
            for o in 0..c_out {
                let orow = &mut out[(ni * c_out + o) * oh * ow..(ni * c_out + o + 1) * oh * ow];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..c_in {
                    let xrow = &xv[(ni * c_in + c) * h * w..(ni * c_in + c + 1) * h * w];
                    let wk = &wv[(o * c_in + c) * 9..(o * c_in + c) * 9 + 9];
                    for ky in 0..3usize {
                        let (y0, y1) = valid(ky, h, oh);
                        for kx in 0..3usize {
                            let wv9 = wk[ky * 3 + kx];
                            if wv9 == 0.0 {
                                continue;
                            }
                            let (x0, x1) = valid(kx, w, ow);
                            for y in y0..y1 {
                                let irow = (y * stride + ky - 1) * w;
                                let obase = y * ow;
                                for xo in x0..x1 {
                                    orow[obase + xo] += wv9 * xrow[irow + xo * stride + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![n, c_out, oh, ow], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let wv = vals[weight.id].data();
            for ni in 0..n {
                for o in 0..c_out {
                    let grow = &g[(ni * c_out + o) * oh * ow..(ni * c_out + o + 1) * oh * ow];
                    grads[bias.id][o] += grow.iter().sum::<f64>();
                    for c in 0..c_in {
                        let xbase = (ni * c_in + c) * h * w;
                        let wbase = (o * c_in + c) * 9;
                        for ky in 0..3usize {
                            let (y0, y1) = valid(ky, h, oh);
                            for kx in 0..3usize {
                                let (x0, x1) = valid(kx, w, ow);
                                let wv9 = wv[wbase + ky * 3 + kx];
                                let mut wacc = 0.0;
                                for y in y0..y1 {
                                    let irow = xbase + (y * stride + ky - 1) * w;
                                    let obase = y * ow;
                                    for xo in x0..x1 {
                                        let go = grow[obase + xo];
                                        let xi = irow + xo * stride + kx - 1;
                                        wacc += go * xv[xi];
                                        grads[x.id][xi] += go * wv9;
                                    }
                                }
                                grads[weight.id][wbase + ky * 3 + kx] += wacc;
                            }
                        }
                    }
                }
            }
        })),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics carried by a batch-norm layer between steps.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel batch normalization over (N,H,W).
///
/// Train mode normalizes with batch statistics (population variance) and
/// updates the running stats in place; eval mode normalizes with the stored
/// running stats.
pub fn batch_norm2d(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut BnStats,
    mode: Mode,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(CosamError::shape(format!("batch_norm2d: x {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] || stats.running_mean.numel() != c {
        return Err(CosamError::shape(format!(
            "batch_norm2d: {c} channels vs gamma {:?}, beta {:?}",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(CosamError::arg(
            "batch_norm2d train mode needs at least 2 elements per channel",
        ));
    }
    let hw = h * w;
    let eps = stats.eps;

    let (mean, var) = match mode {
        Mode::Train => {
            let xv = tape.value(x).data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let row = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    s += row.iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for ni in 0..n {
                    let row = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    v += row.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = v / m as f64;
            }
            // Running stats keep the unbiased variance.
            let mom = stats.momentum;
            let unbias = m as f64 / (m as f64 - 1.0);
            for ci in 0..c {
                stats.running_mean.data_mut()[ci] =
                    (1.0 - mom) * stats.running_mean.data()[ci] + mom * mean[ci];
                stats.running_var.data_mut()[ci] =
                    (1.0 - mom) * stats.running_var.data()[ci] + mom * var[ci] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (
            stats.running_mean.data().to_vec(),
            stats.running_var.data().to_vec(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; n * c * hw];
    {
        let xv = tape.value(x).data();
        let gv = tape.value(gamma).data();
        let bv = tape.value(beta).data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[base + p] = gv[ci] * (xv[base + p] - mean[ci]) * inv_std[ci] + bv[ci];
                }
            }
        }
    }
    let out = Tensor::from_vec(xs.clone(), out)?;

    let train = mode == Mode::Train;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let gv = vals[gamma.id].data();
            for ci in 0..c {
                // Gather per-channel sums.
                let mut gsum = 0.0;
                let mut gxhat = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (xv[base + p] - mean[ci]) * inv_std[ci];
                        gsum += g[base + p];
                        gxhat += g[base + p] * xhat;
                    }
                }
                grads[beta.id][ci] += gsum;
                grads[gamma.id][ci] += gxhat;
                let scale = gv[ci] * inv_std[ci];
                if train {
                    let minv = 1.0 / m as f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            let xhat = (xv[base + p] - mean[ci]) * inv_std[ci];
                            grads[x.id][base + p] +=
                                scale * (g[base + p] - minv * gsum - xhat * minv * gxhat);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            grads[x.id][base + p] += scale * g[base + p];
                        }
                    }
                }
            }
        })),
    ))
}

/// Affine map: `x[B,I] @ w[O,I]^T + b[O]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    let bs = tape.shape(bias).to_vec();
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
        return Err(CosamError::shape(format!(
            "linear: x {xs:?}, w {ws:?}, b {bs:?}"
        )));
    }
    let (b, i, o) = (xs[0], xs[1], ws[0]);
    let mut out = vec![0.0; b * o];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(weight).data();
        let bv = tape.value(bias).data();
        for r in 0..b {
            for c in 0..o {
                let mut acc = bv[c];
                for k in 0..i {
                    acc += xv[r * i + k] * wv[c * i + k];
                }
                out[r * o + c] = acc;
            }
        }
    }
    let out = Tensor::from_vec(vec![b, o], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let wv = vals[weight.id].data();
            for r in 0..b {
                for c in 0..o {
                    let go = g[r * o + c];
                    if go == 0.0 {
                        continue;
                    }
                    grads[bias.id][c] += go;
                    for k in 0..i {
                        grads[x.id][r * i + k] += go * wv[c * i + k];
                        grads[weight.id][c * i + k] += go * xv[r * i + k];
                    }
                }
            }
        })),
    ))
}

/// Spatial mean: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(CosamError::shape(format!("global_avg_pool: x {xs:?}")));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let xv = tape.value(x).data();
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            out[ni * c + ci] = xv[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
    }
    let out = Tensor::from_vec(vec![n, c], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            let inv = 1.0 / hw as f64;
            for ni in 0..n {
                for ci in 0..c {
                    let gi = g[ni * c + ci] * inv;
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        grads[x.id][base + p] += gi;
                    }
                }
            }
        })),
    ))
}

/// Gate features with a per-frame spatial mask: `x[N,C,H,W] * m[N,1,H,W]`.
pub fn mul_spatial_mask(tape: &mut Tape, x: Var, mask: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ms = tape.shape(mask).to_vec();
    if xs.len() != 4 || ms.len() != 4 || ms[1] != 1 || ms[0] != xs[0] || ms[2] != xs[2] || ms[3] != xs[3]
    {
        return Err(CosamError::shape(format!(
            "mul_spatial_mask: x {xs:?}, mask {ms:?}"
        )));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let xv = tape.value(x).data();
    let mv = tape.value(mask).data();
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mbase = ni * hw;
            for p in 0..hw {
                out[base + p] = xv[base + p] * mv[mbase + p];
            }
        }
    }
    let out = Tensor::from_vec(xs.clone(), out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let mv = vals[mask.id].data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mbase = ni * hw;
                    for p in 0..hw {
                        grads[x.id][base + p] += g[base + p] * mv[mbase + p];
                        grads[mask.id][mbase + p] += g[base + p] * xv[base + p];
                    }
                }
            }
        })),
    ))
}

/// Gate features with a shared channel vector: `x[N,C,H,W] * w[C]`.
pub fn mul_channel_vec(tape: &mut Tape, x: Var, weights: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weights).to_vec();
    if xs.len() != 4 || ws.len() != 1 || ws[0] != xs[1] {
        return Err(CosamError::shape(format!(
            "mul_channel_vec: x {xs:?}, w {ws:?}"
        )));
    }
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let xv = tape.value(x).data();
    let wv = tape.value(weights).data();
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                out[base + p] = xv[base + p] * wv[ci];
            }
        }
    }
    let out = Tensor::from_vec(xs.clone(), out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let wv = vals[weights.id].data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        grads[x.id][base + p] += g[base + p] * wv[ci];
                        grads[weights.id][ci] += g[base + p] * xv[base + p];
                    }
                }
            }
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::rng::normal_tensor;
    use crate::tape::{grad_check_multi, Tape};

    #[test]
    fn conv1x1_identity_and_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(normal_tensor(&[1, 2, 2, 2], 1));
        let w = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = conv1x1(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        // all-ones [1,2,1,1], weight [[1,1]] -> 2
        let x = tape.leaf(Tensor::full(&[1, 2, 1, 1], 1.0));
        let w = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = conv1x1(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn conv1x1_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(conv1x1(&mut tape, x, w, b).is_err());
    }

    #[test]
    fn conv1x1_gradcheck_seed7() {
        let x = normal_tensor(&[2, 3, 4, 4], 7);
        let w = normal_tensor(&[2, 3], 70);
        let b = normal_tensor(&[2], 71);
        let err = grad_check_multi(
            &|tape, v| {
                let y = conv1x1(tape, v[0], v[1], v[2])?;
                let y2 = ops::mul(tape, y, y)?;
                Ok(ops::sum(tape, y2))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv3x3_stride_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 8, 6]));
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = conv3x3(&mut tape, x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 3]);
        let y = conv3x3(&mut tape, x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 8, 6]);
    }

    #[test]
    fn conv3x3_gradcheck_both_strides() {
        for (seed, stride) in [(21u64, 1usize), (22, 2)] {
            let x = normal_tensor(&[2, 2, 4, 4], seed);
            let w = normal_tensor(&[3, 2, 3, 3], seed + 100);
            let b = normal_tensor(&[3], seed + 200);
            let err = grad_check_multi(
                &|tape, v| {
                    let y = conv3x3(tape, v[0], v[1], v[2], stride)?;
                    let y2 = ops::mul(tape, y, y)?;
                    Ok(ops::sum(tape, y2))
                },
                &[x, w, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "stride {stride}: {err}");
        }
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let mut tape = Tape::new();
        let x = tape.leaf(normal_tensor(&[2, 3, 4, 4], 3));
        let gamma = tape.leaf(Tensor::full(&[3], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[3]));
        let mut stats = BnStats::new(3);
        let y = batch_norm2d(&mut tape, x, gamma, beta, &mut stats, Mode::Train).unwrap();
        let yv = tape.value(y).data();
        let hw = 16;
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| yv[(n * 3 + c) * hw..(n * 3 + c + 1) * hw].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(normal_tensor(&[2, 2, 2, 2], 5));
        let gamma = tape.leaf(Tensor::zeros(&[2]));
        let beta = tape.leaf(Tensor::from_vec(vec![2], vec![0.5, -1.5]).unwrap());
        let mut stats = BnStats::new(2);
        let y = batch_norm2d(&mut tape, x, gamma, beta, &mut stats, Mode::Train).unwrap();
        let yv = tape.value(y).data();
        for n in 0..2 {
            for c in 0..2 {
                let want = if c == 0 { 0.5 } else { -1.5 };
                for p in 0..4 {
                    assert_eq!(yv[(n * 2 + c) * 4 + p], want);
                }
            }
        }
    }

    #[test]
    fn batch_norm_single_element_train_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let mut stats = BnStats::new(2);
        assert!(batch_norm2d(&mut tape, x, gamma, beta, &mut stats, Mode::Train).is_err());
        assert!(batch_norm2d(&mut tape, x, gamma, beta, &mut stats, Mode::Eval).is_ok());
    }

    #[test]
    fn batch_norm_gradcheck_seed3() {
        for seed in [3u64, 4, 5] {
            let x = normal_tensor(&[2, 2, 3, 3], seed);
            let gamma = normal_tensor(&[2], seed + 10).map(|v| 1.0 + 0.1 * v);
            let beta = normal_tensor(&[2], seed + 20);
            let err = grad_check_multi(
                &|tape, v| {
                    let mut stats = BnStats::new(2);
                    let y = batch_norm2d(tape, v[0], v[1], v[2], &mut stats, Mode::Train)?;
                    let y2 = ops::mul(tape, y, y)?;
                    Ok(ops::sum(tape, y2))
                },
                &[x, gamma, beta],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(normal_tensor(&[3, 4], 6));
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let w = tape.leaf(eye);
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        // x=[1,1], w=[[2,3]], b=[1] -> [6]
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![1.0]).unwrap());
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_gradcheck_seed5() {
        let x = normal_tensor(&[3, 4], 5);
        let w = normal_tensor(&[2, 4], 50);
        let b = normal_tensor(&[2], 51);
        let err = grad_check_multi(
            &|tape, v| {
                let y = linear(tape, v[0], v[1], v[2])?;
                let y2 = ops::mul(tape, y, y)?;
                Ok(ops::sum(tape, y2))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gap_constant_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 4], 2.5));
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let s = ops::sum(&mut tape, y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn broadcast_gates_gradcheck() {
        let x = normal_tensor(&[2, 3, 2, 2], 31);
        let m = normal_tensor(&[2, 1, 2, 2], 32);
        let err = grad_check_multi(
            &|tape, v| {
                let y = mul_spatial_mask(tape, v[0], v[1])?;
                Ok(ops::sum(tape, y))
            },
            &[x.clone(), m],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "spatial: {err}");

        let w = normal_tensor(&[3], 33);
        let err = grad_check_multi(
            &|tape, v| {
                let y = mul_channel_vec(tape, v[0], v[1])?;
                let y2 = ops::mul(tape, y, y)?;
                Ok(ops::sum(tape, y2))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "channel: {err}");
    }
}
