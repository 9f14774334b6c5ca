//! Retrieval evaluation: CMC curves, mean average precision, and a coverage
//! score relating attention masks to ground-truth object regions.

use serde::Serialize;

use crate::error::{CosamError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    /// cmc[r] = fraction of queries whose first correct match appears within
    /// the top r+1 gallery entries.
    pub cmc: Vec<f64>,
    pub mean_ap: f64,
}

fn check_inputs(
    dist: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<(usize, usize)> {
    let shape = dist.shape();
    if shape.len() != 2 {
        return Err(CosamError::shape(format!("distance matrix {shape:?}")));
    }
    let (q, g) = (shape[0], shape[1]);
    if query_labels.len() != q || gallery_labels.len() != g {
        return Err(CosamError::arg(format!(
            "labels ({}, {}) do not match distance matrix ({q}, {g})",
            query_labels.len(),
            gallery_labels.len()
        )));
    }
    for (i, &ql) in query_labels.iter().enumerate() {
        if !gallery_labels.contains(&ql) {
            return Err(CosamError::arg(format!(
                "query {i} (label {ql}) has no gallery match"
            )));
        }
    }
    Ok((q, g))
}

/// Gallery order for one query: ascending distance, ties broken by gallery
/// index so results are deterministic.
fn ranked_gallery(dist_row: &[f64], g: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| dist_row[a].partial_cmp(&dist_row[b]).unwrap().then(a.cmp(&b)));
    order
}

pub fn cmc(
    dist: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
    max_rank: usize,
) -> Result<Vec<f64>> {
    let (q, g) = check_inputs(dist, query_labels, gallery_labels)?;
    if max_rank == 0 || max_rank > g {
        return Err(CosamError::arg(format!(
            "max_rank {max_rank} outside 1..={g}"
        )));
    }
    let mut curve = vec![0.0; max_rank];
    for qi in 0..q {
        let order = ranked_gallery(&dist.data()[qi * g..(qi + 1) * g], g);
        let first = order
            .iter()
            .position(|&gi| gallery_labels[gi] == query_labels[qi])
            .expect("checked above");
        for r in first..max_rank {
            curve[r] += 1.0;
        }
    }
    for v in &mut curve {
        *v /= q as f64;
    }
    Ok(curve)
}

pub fn mean_ap(
    dist: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<f64> {
    let (q, g) = check_inputs(dist, query_labels, gallery_labels)?;
    let mut total = 0.0;
    for qi in 0..q {
        let order = ranked_gallery(&dist.data()[qi * g..(qi + 1) * g], g);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &gi) in order.iter().enumerate() {
            if gallery_labels[gi] == query_labels[qi] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total += ap / hits as f64;
    }
    Ok(total / q as f64)
}

/// Fraction of attention mass falling on the object. `mask: [H, W]` with
/// nonnegative entries; `gt: [GH, GW]` binary at any resolution that tiles
/// evenly into the mask grid. The ground truth is area-averaged down to the
/// mask resolution and re-binarized at 0.5.
pub fn attention_coverage(mask: &Tensor, gt: &Tensor) -> Result<f64> {
    let (ms, gs) = (mask.shape(), gt.shape());
    if ms.len() != 2 || gs.len() != 2 {
        return Err(CosamError::shape(format!(
            "attention_coverage: mask {ms:?}, gt {gs:?}"
        )));
    }
    let (h, w) = (ms[0], ms[1]);
    let (gh, gw) = (gs[0], gs[1]);
    if gh % h != 0 || gw % w != 0 {
        return Err(CosamError::shape(format!(
            "gt {gh}x{gw} does not tile mask {h}x{w}"
        )));
    }
    let (fy, fx) = (gh / h, gw / w);
    let mut mask_sum = 0.0;
    let mut on_object = 0.0;
    let mut gt_cells = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut occ = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    occ += gt.data()[(y * fy + dy) * gw + (x * fx + dx)];
                }
            }
            occ /= (fy * fx) as f64;
            let cell = if occ >= 0.5 { 1.0 } else { 0.0 };
            gt_cells += cell as usize;
            let m = mask.data()[y * w + x];
            if m < 0.0 {
                return Err(CosamError::arg("attention mask has negative entries"));
            }
            mask_sum += m;
            on_object += m * cell;
        }
    }
    if gt_cells == 0 {
        return Err(CosamError::arg(
            "ground-truth mask is empty at the attention resolution",
        ));
    }
    if mask_sum == 0.0 {
        return Err(CosamError::arg("attention mask is all zero"));
    }
    Ok(on_object / mask_sum)
}

pub fn evaluate_retrieval(
    dist: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
    max_rank: usize,
) -> Result<RetrievalResult> {
    Ok(RetrievalResult {
        cmc: cmc(dist, query_labels, gallery_labels, max_rank)?,
        mean_ap: mean_ap(dist, query_labels, gallery_labels)?,
    })
}
