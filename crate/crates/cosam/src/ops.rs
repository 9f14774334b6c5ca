//! Elementwise, reduction, shape and matrix primitives on the tape.
//!
//! Network-specific operations (convolutions, batch norm, pooling, the NCC
//! cost volume) live in [`crate::nn`] and [`crate::cosam`].

use crate::error::{CosamError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(CosamError::shape(format!(
            "{op}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "add")?;
    let out = Tensor::from_vec(
        tape.shape(a).to_vec(),
        tape.value(a)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .map(|(x, y)| x + y)
            .collect(),
    )?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (ga, gi) in grads[a.id].iter_mut().zip(g) {
                *ga += gi;
            }
            for (gb, gi) in grads[b.id].iter_mut().zip(g) {
                *gb += gi;
            }
        })),
    ))
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "sub")?;
    let out = Tensor::from_vec(
        tape.shape(a).to_vec(),
        tape.value(a)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .map(|(x, y)| x - y)
            .collect(),
    )?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (ga, gi) in grads[a.id].iter_mut().zip(g) {
                *ga += gi;
            }
            for (gb, gi) in grads[b.id].iter_mut().zip(g) {
                *gb -= gi;
            }
        })),
    ))
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mul")?;
    let out = Tensor::from_vec(
        tape.shape(a).to_vec(),
        tape.value(a)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .map(|(x, y)| x * y)
            .collect(),
    )?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let (av, bv) = (vals[a.id].data(), vals[b.id].data());
            for i in 0..g.len() {
                grads[a.id][i] += g[i] * bv[i];
                grads[b.id][i] += g[i] * av[i];
            }
        })),
    ))
}

pub fn scale(tape: &mut Tape, x: Var, c: f64) -> Var {
    let out = tape.value(x).map(|v| v * c);
    tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (gx, gi) in grads[x.id].iter_mut().zip(g) {
                *gx += c * gi;
            }
        })),
    )
}

pub fn sum(tape: &mut Tape, x: Var) -> Var {
    let total: f64 = tape.value(x).data().iter().sum();
    tape.push(
        Tensor::scalar(total),
        Some(Box::new(move |_vals, g, grads| {
            let gi = g[0];
            for gx in grads[x.id].iter_mut() {
                *gx += gi;
            }
        })),
    )
}

pub fn mean(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).numel() as f64;
    let total: f64 = tape.value(x).data().iter().sum();
    tape.push(
        Tensor::scalar(total / n),
        Some(Box::new(move |_vals, g, grads| {
            let gi = g[0] / n;
            for gx in grads[x.id].iter_mut() {
                *gx += gi;
            }
        })),
    )
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let out = tape.value(x).map(|v| v.max(0.0));
    tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            for i in 0..g.len() {
                if xv[i] > 0.0 {
                    grads[x.id][i] += g[i];
                }
            }
        })),
    )
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    let out = tape.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
    let id = tape.push(out, None);
    let out_id = id.id;
    // Rewire with a backward that reads the just-stored output value.
    let back: crate::tape::BackwardFn = Box::new(move |vals, g, grads| {
        let yv = vals[out_id].data();
        for i in 0..g.len() {
            grads[x.id][i] += g[i] * yv[i] * (1.0 - yv[i]);
        }
    });
    tape.set_backward(id, back);
    id
}

/// Softmax along `axis`, normalizing to sum 1 with the usual max-shift for
/// stability.
pub fn softmax(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(CosamError::arg(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let out = axiswise(tape.value(x), axis, softmax_slice);
    let id = tape.push(out, None);
    let out_id = id.id;
    let axis_copy = axis;
    let back: crate::tape::BackwardFn = Box::new(move |vals, g, grads| {
        let y = &vals[out_id];
        let shape = y.shape();
        for_each_lane(shape, axis_copy, |offsets| {
            let dot: f64 = offsets
                .iter()
                .map(|&o| g[o] * y.data()[o])
                .sum();
            for &o in offsets {
                grads[x.id][o] += y.data()[o] * (g[o] - dot);
            }
        });
    });
    tape.set_backward(id, back);
    Ok(id)
}

/// Numerically stable log-softmax along `axis`.
pub fn log_softmax(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if axis >= shape.len() {
        return Err(CosamError::arg(format!(
            "log_softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let out = axiswise(tape.value(x), axis, |lane| {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lane.iter().map(|v| v - lse).collect()
    });
    let id = tape.push(out, None);
    let out_id = id.id;
    let back: crate::tape::BackwardFn = Box::new(move |vals, g, grads| {
        let y = &vals[out_id];
        for_each_lane(y.shape(), axis, |offsets| {
            let gsum: f64 = offsets.iter().map(|&o| g[o]).sum();
            for &o in offsets {
                grads[x.id][o] += g[o] - y.data()[o].exp() * gsum;
            }
        });
    });
    tape.set_backward(id, back);
    Ok(id)
}

fn softmax_slice(lane: &[f64]) -> Vec<f64> {
    let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lane.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Apply `f` independently to each 1-D lane along `axis`.
fn axiswise(t: &Tensor, axis: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let mut out = vec![0.0; t.numel()];
    for_each_lane(t.shape(), axis, |offsets| {
        let lane: Vec<f64> = offsets.iter().map(|&o| t.data()[o]).collect();
        let mapped = f(&lane);
        for (&o, v) in offsets.iter().zip(mapped) {
            out[o] = v;
        }
    });
    Tensor::from_vec(t.shape().to_vec(), out).expect("axiswise preserves shape")
}

/// Visit flat offsets of every lane along `axis` of `shape`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let strides = crate::tensor::strides_of(shape);
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut offsets = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (k, off) in offsets.iter_mut().enumerate() {
                *off = base + k * axis_stride;
            }
            f(&offsets);
        }
    }
}

pub fn reshape(tape: &mut Tape, x: Var, shape: Vec<usize>) -> Result<Var> {
    let numel: usize = shape.iter().product();
    if numel != tape.value(x).numel() {
        return Err(CosamError::shape(format!(
            "reshape {:?} -> {shape:?}",
            tape.shape(x)
        )));
    }
    let out = Tensor::from_vec(shape, tape.value(x).data().to_vec())?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (gx, gi) in grads[x.id].iter_mut().zip(g) {
                *gx += gi;
            }
        })),
    ))
}

/// Permute the axes of a rank-3 tensor.
pub fn permute3(tape: &mut Tape, x: Var, perm: [usize; 3]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(CosamError::shape(format!(
            "permute3 expects rank 3, got {shape:?}"
        )));
    }
    let mut seen = [false; 3];
    for &p in &perm {
        if p >= 3 || seen[p] {
            return Err(CosamError::arg(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let data = permute3_data(tape.value(x).data(), &shape, perm);
    let out = Tensor::from_vec(out_shape.to_vec(), data)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            // Scatter: out[i0,i1,i2] came from x[idx[perm]].
            let in_strides = crate::tensor::strides_of(&shape);
            let mut pos = 0usize;
            for i0 in 0..out_shape[0] {
                for i1 in 0..out_shape[1] {
                    for i2 in 0..out_shape[2] {
                        let mut idx = [0usize; 3];
                        idx[perm[0]] = i0;
                        idx[perm[1]] = i1;
                        idx[perm[2]] = i2;
                        let src = idx[0] * in_strides[0] + idx[1] * in_strides[1] + idx[2];
                        grads[x.id][src] += g[pos];
                        pos += 1;
                    }
                }
            }
        })),
    ))
}

fn permute3_data(data: &[f64], shape: &[usize], perm: [usize; 3]) -> Vec<f64> {
    let in_strides = crate::tensor::strides_of(shape);
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..out_shape[0] {
        for i1 in 0..out_shape[1] {
            for i2 in 0..out_shape[2] {
                let mut idx = [0usize; 3];
                idx[perm[0]] = i0;
                idx[perm[1]] = i1;
                idx[perm[2]] = i2;
                out.push(data[idx[0] * in_strides[0] + idx[1] * in_strides[1] + idx[2]]);
            }
        }
    }
    out
}

/// `a[M,K] @ b[K,N] -> [M,N]`
pub fn matmul2(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(CosamError::shape(format!("matmul2 {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    {
        let (av, bv) = (tape.value(a).data(), tape.value(b).data());
        matmul_acc(av, bv, &mut out, m, k, n);
    }
    let out = Tensor::from_vec(vec![m, n], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let (av, bv) = (vals[a.id].data(), vals[b.id].data());
            // dA = g @ B^T
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        grads[a.id][i * k + p] += gij * bv[p * n + j];
                        grads[b.id][p * n + j] += gij * av[i * k + p];
                    }
                }
            }
        })),
    ))
}

/// Batched matmul: `a[B,M,K] @ b[B,K,N] -> [B,M,N]`
pub fn bmm(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(CosamError::shape(format!("bmm {sa:?} x {sb:?}")));
    }
    let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let mut out = vec![0.0; bsz * m * n];
    {
        let (av, bv) = (tape.value(a).data(), tape.value(b).data());
        for bi in 0..bsz {
            matmul_acc(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
    let out = Tensor::from_vec(vec![bsz, m, n], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let (av, bv) = (vals[a.id].data(), vals[b.id].data());
            for bi in 0..bsz {
                let (ao, bo, go) = (bi * m * k, bi * k * n, bi * m * n);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[go + i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            grads[a.id][ao + i * k + p] += gij * bv[bo + p * n + j];
                            grads[b.id][bo + p * n + j] += gij * av[ao + i * k + p];
                        }
                    }
                }
            }
        })),
    ))
}

fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// Add a constant tensor to `x`, broadcasting the constant over axis 0.
/// Used for additive attention masks; no gradient flows into the constant.
pub fn add_const_broadcast0(tape: &mut Tape, x: Var, c: &Tensor) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let inner: usize = shape[1..].iter().product();
    if c.numel() != inner {
        return Err(CosamError::shape(format!(
            "broadcast add: constant {:?} vs inner dims of {shape:?}",
            c.shape()
        )));
    }
    let mut data = tape.value(x).data().to_vec();
    for b in 0..shape[0] {
        for i in 0..inner {
            data[b * inner + i] += c.data()[i];
        }
    }
    let out = Tensor::from_vec(shape, data)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (gx, gi) in grads[x.id].iter_mut().zip(g) {
                *gx += gi;
            }
        })),
    ))
}

/// Mean over axis 0 of a rank-2 tensor: `[N,D] -> [D]`.
pub fn mean_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(CosamError::shape(format!(
            "mean_rows expects rank 2, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let xv = tape.value(x).data();
    let mut out = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            out[c] += xv[r * d + c];
        }
    }
    for v in &mut out {
        *v /= n as f64;
    }
    let out = Tensor::from_vec(vec![d], out)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            let inv = 1.0 / n as f64;
            for r in 0..n {
                for c in 0..d {
                    grads[x.id][r * d + c] += g[c] * inv;
                }
            }
        })),
    ))
}

/// Stack rank-1 vectors of equal length into a `[B,D]` matrix.
pub fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(CosamError::arg("stack_rows: empty input"));
    }
    let d = tape.value(rows[0]).numel();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        let v = tape.value(r);
        if v.rank() != 1 || v.numel() != d {
            return Err(CosamError::shape(format!(
                "stack_rows: expected [{d}], got {:?}",
                v.shape()
            )));
        }
        data.extend_from_slice(v.data());
    }
    let out = Tensor::from_vec(vec![rows.len(), d], data)?;
    let ids: Vec<usize> = rows.iter().map(|v| v.id).collect();
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    grads[id][c] += g[r * d + c];
                }
            }
        })),
    ))
}

/// Test helper with a deliberately broken backward pass (off by a factor of
/// two). Exists so the gradient checker's negative control has a target.
#[doc(hidden)]
pub fn scale_with_wrong_backward(tape: &mut Tape, x: Var, c: f64) -> Var {
    let out = tape.value(x).map(|v| v * c);
    tape.push(
        out,
        Some(Box::new(move |_vals, g, grads| {
            for (gx, gi) in grads[x.id].iter_mut().zip(g) {
                *gx += 2.0 * c * gi;
            }
        })),
    )
}
