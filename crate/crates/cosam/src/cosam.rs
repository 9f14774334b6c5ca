//! Co-Segmentation Activation Module: spatial attention driven by an NCC
//! cost volume across a snippet's frames, followed by frame-averaged channel
//! attention. Output has the same shape as the input, so the module drops
//! between any two CNN blocks.

use rand_chacha::ChaCha8Rng;

use crate::error::{CosamError, Result};
use crate::layers::{BatchNorm2dLayer, Conv1x1Layer, LinearLayer, ParamGroup};
use crate::nn::{self, Mode};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CosamConfig {
    /// Reduced descriptor channels (D -> D_R before matching).
    pub d_r: usize,
    /// Reference frames compared against each frame.
    pub k: usize,
    /// Stability constant added to each descriptor's standard deviation.
    pub eps_ncc: f64,
    /// Bottleneck width of the channel MLP; defaults to `d_r`.
    pub mlp_hidden: Option<usize>,
    /// Ablation switches (both on = full module).
    pub spatial: bool,
    pub channel: bool,
}

impl Default for CosamConfig {
    fn default() -> Self {
        CosamConfig {
            d_r: 256,
            k: 3,
            eps_ncc: 1e-4,
            mlp_hidden: None,
            spatial: true,
            channel: true,
        }
    }
}

impl CosamConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.d_r >= d {
            return Err(CosamError::config(format!(
                "d_r ({}) must be smaller than input channels ({d})",
                self.d_r
            )));
        }
        if self.k == 0 {
            return Err(CosamError::config("k must be at least 1"));
        }
        if self.mlp_hidden == Some(0) {
            return Err(CosamError::config("mlp_hidden must be at least 1"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.d_r)
    }
}

/// NCC between two descriptors, population standard deviations, `eps` added
/// to each sigma. Zero-variance descriptors yield exactly 0.
pub fn ncc_scalar(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CosamError::shape(format!(
            "ncc: descriptor lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.len() < 2 {
        return Err(CosamError::arg("ncc: descriptors need length >= 2"));
    }
    let d = p.len() as f64;
    let mu_p: f64 = p.iter().sum::<f64>() / d;
    let mu_q: f64 = q.iter().sum::<f64>() / d;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vq = 0.0;
    for i in 0..p.len() {
        let a = p[i] - mu_p;
        let b = q[i] - mu_q;
        cov += a * b;
        vp += a * a;
        vq += b * b;
    }
    let sp = (vp / d).sqrt() + eps;
    let sq = (vq / d).sqrt() + eps;
    Ok(cov / (d * sp * sq))
}

/// Differentiable NCC between two rank-1 descriptors on the tape.
pub fn ncc(tape: &mut Tape, p: Var, q: Var, eps: f64) -> Result<Var> {
    let (ps, qs) = (tape.shape(p).to_vec(), tape.shape(q).to_vec());
    if ps.len() != 1 || qs.len() != 1 || ps[0] != qs[0] {
        return Err(CosamError::shape(format!("ncc: shapes {ps:?} vs {qs:?}")));
    }
    if ps[0] < 2 {
        return Err(CosamError::arg("ncc: descriptors need length >= 2"));
    }
    let value = ncc_scalar(tape.value(p).data(), tape.value(q).data(), eps)?;
    Ok(tape.push(
        Tensor::scalar(value),
        Some(Box::new(move |vals, g, grads| {
            let (pd, qd) = (vals[p.id].data(), vals[q.id].data());
            let mut gp = vec![0.0; pd.len()];
            let mut gq = vec![0.0; qd.len()];
            ncc_pair_backward(pd, qd, eps, g[0], &mut gp, &mut gq);
            for (a, b) in grads[p.id].iter_mut().zip(gp) {
                *a += b;
            }
            for (a, b) in grads[q.id].iter_mut().zip(gq) {
                *a += b;
            }
        })),
    ))
}

/// Shared derivative of NCC w.r.t. both descriptors.
/// Accumulates `g * dNCC/dp` into `gp` and `g * dNCC/dq` into `gq`.
fn ncc_pair_backward(p: &[f64], q: &[f64], eps: f64, g: f64, gp: &mut [f64], gq: &mut [f64]) {
    let d = p.len() as f64;
    let mu_p: f64 = p.iter().sum::<f64>() / d;
    let mu_q: f64 = q.iter().sum::<f64>() / d;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vq = 0.0;
    for i in 0..p.len() {
        let a = p[i] - mu_p;
        let b = q[i] - mu_q;
        cov += a * b;
        vp += a * a;
        vq += b * b;
    }
    let sig_p = (vp / d).sqrt();
    let sig_q = (vq / d).sqrt();
    let sp = sig_p + eps;
    let sq = sig_q + eps;
    let denom = d * sp * sq;
    let out = cov / denom;
    for i in 0..p.len() {
        let a = p[i] - mu_p;
        let b = q[i] - mu_q;
        let mut dp = b / denom;
        if sig_p > 1e-300 {
            dp -= out / sp * a / (d * sig_p);
        }
        let mut dq = a / denom;
        if sig_q > 1e-300 {
            dq -= out / sq * b / (d * sig_q);
        }
        gp[i] += g * dp;
        gq[i] += g * dq;
    }
}

/// The K temporally nearest frames to `n` in `0..len`, excluding `n`,
/// ties broken toward earlier frames, ordered nearest-first.
pub fn select_references(n: usize, len: usize, k: usize) -> Result<Vec<usize>> {
    if len < 2 || k > len - 1 {
        return Err(CosamError::arg(format!(
            "select_references: k={k} infeasible for snippet length {len}"
        )));
    }
    if n >= len {
        return Err(CosamError::arg(format!(
            "select_references: frame {n} out of range 0..{len}"
        )));
    }
    let mut candidates: Vec<usize> = (0..len).filter(|&i| i != n).collect();
    candidates.sort_by_key(|&i| (n.abs_diff(i), i));
    candidates.truncate(k);
    Ok(candidates)
}

/// Per-frame NCC comparisons against K reference frames.
pub struct CostVolume {
    /// Shape `[N, K*H*W, H, W]`; comparison axis is (k, h, w) row-major.
    pub values: Var,
    /// For each frame, its ordered reference frame indices.
    pub frame_refs: Vec<Vec<usize>>,
}

/// Build the cost volume over reduced features `[N, D_R, H, W]`.
pub fn build_cost_volume(tape: &mut Tape, f_reduced: Var, k: usize, eps: f64) -> Result<CostVolume> {
    let xs = tape.shape(f_reduced).to_vec();
    if xs.len() != 4 {
        return Err(CosamError::shape(format!("cost volume input {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if n < 2 {
        return Err(CosamError::arg("cost volume needs at least 2 frames"));
    }
    if c < 2 {
        return Err(CosamError::arg("cost volume descriptors need length >= 2"));
    }
    let refs: Vec<Vec<usize>> = (0..n)
        .map(|fi| select_references(fi, n, k))
        .collect::<Result<_>>()?;
    let hw = h * w;
    let khw = k * hw;

    let stats = descriptor_stats(tape.value(f_reduced).data(), n, c, hw);
    let xv = tape.value(f_reduced).data();
    let mut out = vec![0.0; n * khw * hw];
    for fi in 0..n {
        for (ki, &rf) in refs[fi].iter().enumerate() {
            for r in 0..hw {
                for q in 0..hw {
                    let mut cov = 0.0;
                    for d in 0..c {
                        let a = xv[(fi * c + d) * hw + q] - stats.mean[fi * hw + q];
                        let b = xv[(rf * c + d) * hw + r] - stats.mean[rf * hw + r];
                        cov += a * b;
                    }
                    let sp = stats.sigma[fi * hw + q] + eps;
                    let sq = stats.sigma[rf * hw + r] + eps;
                    out[((fi * k + ki) * hw + r) * hw + q] = cov / (c as f64 * sp * sq);
                }
            }
        }
    }
    let out = Tensor::from_vec(vec![n, khw, h, w], out)?;
    let refs_back = refs.clone();
    let x = f_reduced;
    let values = tape.push(
        out,
        Some(Box::new(move |vals, g, grads| {
            let xv = vals[x.id].data();
            let stats = descriptor_stats(xv, n, c, hw);
            let df = c as f64;
            for fi in 0..n {
                for (ki, &rf) in refs_back[fi].iter().enumerate() {
                    for r in 0..hw {
                        let sig_q = stats.sigma[rf * hw + r];
                        let sq = sig_q + eps;
                        for q in 0..hw {
                            let go = g[((fi * k + ki) * hw + r) * hw + q];
                            if go == 0.0 {
                                continue;
                            }
                            let sig_p = stats.sigma[fi * hw + q];
                            let sp = sig_p + eps;
                            let denom = df * sp * sq;
                            let mut cov = 0.0;
                            for d in 0..c {
                                let a = xv[(fi * c + d) * hw + q] - stats.mean[fi * hw + q];
                                let b = xv[(rf * c + d) * hw + r] - stats.mean[rf * hw + r];
                                cov += a * b;
                            }
                            let out_v = cov / denom;
                            for d in 0..c {
                                let a = xv[(fi * c + d) * hw + q] - stats.mean[fi * hw + q];
                                let b = xv[(rf * c + d) * hw + r] - stats.mean[rf * hw + r];
                                let mut dp = b / denom;
                                if sig_p > 1e-300 {
                                    dp -= out_v / sp * a / (df * sig_p);
                                }
                                let mut dq = a / denom;
                                if sig_q > 1e-300 {
                                    dq -= out_v / sq * b / (df * sig_q);
                                }
                                grads[x.id][(fi * c + d) * hw + q] += go * dp;
                                grads[x.id][(rf * c + d) * hw + r] += go * dq;
                            }
                        }
                    }
                }
            }
        })),
    );
    Ok(CostVolume {
        values,
        frame_refs: refs,
    })
}

struct DescriptorStats {
    mean: Vec<f64>,
    sigma: Vec<f64>,
}

fn descriptor_stats(xv: &[f64], n: usize, c: usize, hw: usize) -> DescriptorStats {
    let mut mean = vec![0.0; n * hw];
    let mut sigma = vec![0.0; n * hw];
    for fi in 0..n {
        for p in 0..hw {
            let mut s = 0.0;
            for d in 0..c {
                s += xv[(fi * c + d) * hw + p];
            }
            let mu = s / c as f64;
            let mut v = 0.0;
            for d in 0..c {
                let a = xv[(fi * c + d) * hw + p] - mu;
                v += a * a;
            }
            mean[fi * hw + p] = mu;
            sigma[fi * hw + p] = (v / c as f64).sqrt();
        }
    }
    DescriptorStats { mean, sigma }
}

/// Slope of the initial mask around the NCC baseline.
const SUMMARY_GAIN: f64 = 140.0;
/// Typical mean NCC between rectified descriptors at unrelated locations.
const NCC_BASELINE: f64 = 0.84;

/// Spatial attention step: reduce, match, summarize, gate.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub reduce: Conv1x1Layer,
    pub bn: BatchNorm2dLayer,
    pub summary: Conv1x1Layer,
    pub k: usize,
    pub eps_ncc: f64,
}

impl SpatialAttention {
    /// `h, w` fix the summary conv's input width (K*H*W cost channels).
    pub fn new(
        name: &str,
        d: usize,
        d_r: usize,
        k: usize,
        h: usize,
        w: usize,
        eps_ncc: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SpatialAttention {
            reduce: Conv1x1Layer::new(&format!("{name}.reduce"), d, d_r, rng),
            bn: BatchNorm2dLayer::new(&format!("{name}.bn"), d_r),
            // Centered averaging init: the mask starts as
            // sigmoid(gain * (mean NCC - baseline)). Rectified features give
            // strongly positive NCC everywhere (typically ~0.7), so an
            // uncentered average saturates the sigmoid; subtracting a typical
            // background level makes co-salient regions brighter from step
            // one and training only has to sharpen the summary.
            summary: {
                let mut conv =
                    Conv1x1Layer::averaging(&format!("{name}.summary"), k * h * w, 1, SUMMARY_GAIN);
                conv.bias = Tensor::full(&[1], -SUMMARY_GAIN * NCC_BASELINE);
                conv
            },
            k,
            eps_ncc,
        }
    }

    /// Returns spatially gated features and the mask `[N,1,H,W]`.
    pub fn forward(&mut self, tape: &mut Tape, f: Var, mode: Mode) -> Result<(Var, Var)> {
        let reduced = self.reduce.forward(tape, f)?;
        let normed = self.bn.forward(tape, reduced, mode)?;
        let feat = ops::relu(tape, normed);
        let cost = build_cost_volume(tape, feat, self.k, self.eps_ncc)?;
        let summary = self.summary.forward(tape, cost.values)?;
        let mask = ops::sigmoid(tape, summary);
        let gated = nn::mul_spatial_mask(tape, f, mask)?;
        Ok((gated, mask))
    }
}

impl ParamGroup for SpatialAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.reduce.visit(f);
        self.bn.visit(f);
        self.summary.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.reduce.visit_mut(f);
        self.bn.visit_mut(f);
        self.summary.visit_mut(f);
    }
}

/// Channel attention step: per-frame squeeze through a shared MLP, weights
/// averaged over frames into a single gate applied to every frame.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub encoder: LinearLayer,
    pub decoder: LinearLayer,
}

impl ChannelAttention {
    pub fn new(name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        ChannelAttention {
            encoder: LinearLayer::new(&format!("{name}.encoder"), d, hidden, rng),
            decoder: LinearLayer::new(&format!("{name}.decoder"), hidden, d, rng),
        }
    }

    /// Returns channel-gated features and the shared weight vector `[D]`.
    pub fn forward(&self, tape: &mut Tape, f_spat: Var) -> Result<(Var, Var)> {
        let pooled = nn::global_avg_pool(tape, f_spat)?;
        let hidden = self.encoder.forward(tape, pooled)?;
        let hidden = ops::relu(tape, hidden);
        let per_frame = self.decoder.forward(tape, hidden)?;
        let per_frame = ops::sigmoid(tape, per_frame);
        let weights = ops::mean_rows(tape, per_frame)?;
        let gated = nn::mul_channel_vec(tape, f_spat, weights)?;
        Ok((gated, weights))
    }
}

impl ParamGroup for ChannelAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

pub struct CosamOutput {
    pub features: Var,
    /// `[N,1,H,W]`, present when spatial attention is enabled.
    pub mask: Option<Var>,
    /// `[D]`, present when channel attention is enabled.
    pub channel_weights: Option<Var>,
}

/// The full module; either attention step can be ablated away.
#[derive(Debug, Clone)]
pub struct Cosam {
    pub spatial: SpatialAttention,
    pub channel: ChannelAttention,
    pub spatial_enabled: bool,
    pub channel_enabled: bool,
}

impl Cosam {
    pub fn new(
        name: &str,
        d: usize,
        h: usize,
        w: usize,
        cfg: &CosamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(d)?;
        Ok(Cosam {
            spatial: SpatialAttention::new(
                &format!("{name}.spatial"),
                d,
                cfg.d_r,
                cfg.k,
                h,
                w,
                cfg.eps_ncc,
                rng,
            ),
            channel: ChannelAttention::new(&format!("{name}.channel"), d, cfg.hidden(), rng),
            spatial_enabled: cfg.spatial,
            channel_enabled: cfg.channel,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, f: Var, mode: Mode) -> Result<CosamOutput> {
        let (f_spat, mask) = if self.spatial_enabled {
            let (gated, mask) = self.spatial.forward(tape, f, mode)?;
            (gated, Some(mask))
        } else {
            (f, None)
        };
        let (features, channel_weights) = if self.channel_enabled {
            let (gated, w) = self.channel.forward(tape, f_spat)?;
            (gated, Some(w))
        } else {
            (f_spat, None)
        };
        Ok(CosamOutput {
            features,
            mask,
            channel_weights,
        })
    }
}

impl ParamGroup for Cosam {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.spatial.visit(f);
        self.channel.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.spatial.visit_mut(f);
        self.channel.visit_mut(f);
    }
}
