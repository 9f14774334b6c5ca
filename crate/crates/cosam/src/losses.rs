//! Training objectives: softmax cross-entropy over identities, batch-hard
//! triplet loss on embeddings, and a KL term for two-branch mutual learning.

use crate::error::{CosamError, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy. `logits: [B, C]`, one class index per row.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(CosamError::shape(format!("cross_entropy logits {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(CosamError::arg(format!(
            "cross_entropy: {} targets for batch {b}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(CosamError::arg(format!(
            "cross_entropy: target {t} out of range for {c} classes"
        )));
    }
    let xv = tape.value(logits).data();
    // probs kept for the backward pass: grad = (softmax - onehot) / B
    let mut probs = vec![0.0; b * c];
    let mut loss = 0.0;
    for r in 0..b {
        let row = &xv[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        loss += m + z.ln() - row[targets[r]];
        for j in 0..c {
            probs[r * c + j] = (row[j] - m).exp() / z;
        }
    }
    let targets = targets.to_vec();
    Ok(tape.push(
        Tensor::scalar(loss / b as f64),
        Some(Box::new(move |_vals, g, grads| {
            let gi = g[0] / b as f64;
            let gx = &mut grads[logits.id];
            for r in 0..b {
                for j in 0..c {
                    let ind = if j == targets[r] { 1.0 } else { 0.0 };
                    gx[r * c + j] += gi * (probs[r * c + j] - ind);
                }
            }
        })),
    ))
}

/// Batch-hard triplet loss with Euclidean distances. For each anchor the
/// farthest same-label sample and nearest different-label sample form the
/// triplet; anchors missing either are skipped. Ties resolve to the lowest
/// index. Errors when every anchor is skipped.
pub fn batch_hard_triplet(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(CosamError::shape(format!("triplet embeddings {shape:?}")));
    }
    let (b, d) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(CosamError::arg(format!(
            "triplet: {} labels for batch {b}",
            labels.len()
        )));
    }
    let ev = tape.value(embeddings).data();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = ev[i * d + k] - ev[j * d + k];
            s += diff * diff;
        }
        s.sqrt()
    };

    // (anchor, hardest positive, hardest negative) for anchors with both.
    let mut triplets = Vec::new();
    let mut loss = 0.0;
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dj = dist(a, j);
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, dp)| dj > dp) {
                    pos = Some((j, dj));
                }
            } else if neg.map_or(true, |(_, dn)| dj < dn) {
                neg = Some((j, dj));
            }
        }
        if let (Some((p, dp)), Some((n, dn))) = (pos, neg) {
            loss += (dp - dn + margin).max(0.0);
            triplets.push((a, p, n));
        }
    }
    if triplets.is_empty() {
        return Err(CosamError::arg(
            "triplet: no anchor has both a positive and a negative",
        ));
    }
    let m = triplets.len() as f64;
    Ok(tape.push(
        Tensor::scalar(loss / m),
        Some(Box::new(move |vals, g, grads| {
            let ev = vals[embeddings.id].data();
            let gx = &mut grads[embeddings.id];
            for &(a, p, n) in &triplets {
                let mut dp = 0.0;
                let mut dn = 0.0;
                for k in 0..d {
                    dp += (ev[a * d + k] - ev[p * d + k]).powi(2);
                    dn += (ev[a * d + k] - ev[n * d + k]).powi(2);
                }
                let (dp, dn) = (dp.sqrt(), dn.sqrt());
                if dp - dn + margin <= 0.0 {
                    continue;
                }
                let gi = g[0] / m;
                if dp > 0.0 {
                    for k in 0..d {
                        let u = (ev[a * d + k] - ev[p * d + k]) / dp;
                        gx[a * d + k] += gi * u;
                        gx[p * d + k] -= gi * u;
                    }
                }
                if dn > 0.0 {
                    for k in 0..d {
                        let u = (ev[a * d + k] - ev[n * d + k]) / dn;
                        gx[a * d + k] -= gi * u;
                        gx[n * d + k] += gi * u;
                    }
                }
            }
        })),
    ))
}

/// Mean KL(P || Q) where P, Q are row-wise softmax of the two logit sets.
pub fn kl_divergence(tape: &mut Tape, logits_p: Var, logits_q: Var) -> Result<Var> {
    let sp = tape.shape(logits_p).to_vec();
    let sq = tape.shape(logits_q).to_vec();
    if sp != sq || sp.len() != 2 {
        return Err(CosamError::shape(format!(
            "kl_divergence: {sp:?} vs {sq:?}"
        )));
    }
    let b = sp[0];
    let p = ops::softmax(tape, logits_p, 1)?;
    let lp = ops::log_softmax(tape, logits_p, 1)?;
    let lq = ops::log_softmax(tape, logits_q, 1)?;
    let diff = ops::sub(tape, lp, lq)?;
    let terms = ops::mul(tape, p, diff)?;
    let total = ops::sum(tape, terms);
    Ok(ops::scale(tape, total, 1.0 / b as f64))
}

/// Identity classification plus weighted triplet: `ce + lambda_tri * triplet`.
pub fn reid_loss(
    tape: &mut Tape,
    logits: Var,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
    lambda_tri: f64,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, labels)?;
    let tri = batch_hard_triplet(tape, embeddings, labels, margin)?;
    let tri = ops::scale(tape, tri, lambda_tri);
    ops::add(tape, ce, tri)
}

/// Two-branch mutual-learning objective:
/// `ce(P) + lambda_q * ce(Q) + lambda_kl * KL(P || Q)`.
pub fn distill_loss(
    tape: &mut Tape,
    logits_p: Var,
    logits_q: Var,
    labels: &[usize],
    lambda_q: f64,
    lambda_kl: f64,
) -> Result<Var> {
    let ce_p = cross_entropy(tape, logits_p, labels)?;
    let ce_q = cross_entropy(tape, logits_q, labels)?;
    let kl = kl_divergence(tape, logits_p, logits_q)?;
    let ce_q = ops::scale(tape, ce_q, lambda_q);
    let kl = ops::scale(tape, kl, lambda_kl);
    let partial = ops::add(tape, ce_p, ce_q)?;
    ops::add(tape, partial, kl)
}
