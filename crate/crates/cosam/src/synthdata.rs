//! Synthetic co-salient video snippets. Each identity is a textured shape
//! that drifts across a frame of per-frame random clutter: the object looks
//! the same in every frame of a snippet (up to illumination), while the
//! background decorrelates from frame to frame. That asymmetry is exactly
//! what cross-frame correlation attention should pick up.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CosamError, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Bar,
    Blob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub shape: ShapeKind,
    pub texture_seed: u64,
    /// Per-channel reflectance multipliers in [0.5, 1].
    pub hue: [f64; 3],
    /// Object half-extent as a fraction of the shorter frame side, in
    /// [0.1, 0.4].
    pub size_frac: f64,
}

pub fn gen_identities(count: usize, seed: u64) -> Result<Vec<IdentitySpec>> {
    if count < 2 {
        return Err(CosamError::arg("need at least 2 identities"));
    }
    let mut rng = substream(seed, "identities");
    let shapes = [ShapeKind::Disk, ShapeKind::Bar, ShapeKind::Blob];
    let mut specs = Vec::with_capacity(count);
    for id in 0..count {
        specs.push(IdentitySpec {
            id,
            shape: shapes[rng.gen_range(0..3)],
            texture_seed: rng.gen(),
            hue: [
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
            ],
            // lower bound keeps objects visible even after aggressive
            // downsampling inside the host network
            size_frac: rng.gen_range(0.18..0.4),
        });
    }
    Ok(specs)
}

/// Value noise: bilinear interpolation over a small random grid, periodic in
/// both directions. Values lie in [0, 1].
struct ValueNoise {
    grid: Vec<f64>,
    size: usize,
}

impl ValueNoise {
    fn new(seed: u64, size: usize) -> Self {
        let mut rng = substream(seed, "value-noise");
        ValueNoise {
            grid: (0..size * size).map(|_| rng.gen()).collect(),
            size,
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let s = self.size as f64;
        let (y, x) = (y.rem_euclid(s), x.rem_euclid(s));
        let (y0, x0) = (y.floor() as usize % self.size, x.floor() as usize % self.size);
        let (y1, x1) = ((y0 + 1) % self.size, (x0 + 1) % self.size);
        let (fy, fx) = (y - y.floor(), x - x.floor());
        let g = |yy: usize, xx: usize| self.grid[yy * self.size + xx];
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
        let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SnippetParams {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Amplitude of per-pixel background noise (plus clutter patches).
    pub clutter: f64,
    /// Probability that a snippet carries a moving occluder strip.
    pub occlusion_prob: f64,
    /// Maximum object drift per frame, in pixels per axis.
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for SnippetParams {
    fn default() -> Self {
        SnippetParams {
            t: 8,
            h: 64,
            w: 32,
            clutter: 0.45,
            occlusion_prob: 0.3,
            max_speed: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Snippet {
    pub identity: usize,
    /// `[T, 3, H, W]`, values in [0, 1].
    pub frames: Tensor,
    /// `[T, H, W]`, 1 on visible object pixels.
    pub gt_masks: Tensor,
}

fn half_extents(shape: ShapeKind, e: f64, h: usize, w: usize) -> (f64, f64) {
    match shape {
        ShapeKind::Disk | ShapeKind::Blob => (e, e),
        // bars stretch along the longer frame side
        ShapeKind::Bar => {
            if h >= w {
                (1.4 * e, 0.55 * e)
            } else {
                (0.55 * e, 1.4 * e)
            }
        }
    }
}

fn in_support(shape: ShapeKind, dy: f64, dx: f64, blob: &ValueNoise) -> bool {
    match shape {
        ShapeKind::Disk => dy * dy + dx * dx <= 1.0,
        ShapeKind::Bar => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        ShapeKind::Blob => {
            let r2 = dy * dy + dx * dx;
            // solid core with a noise-carved rim, so the support never
            // collapses to nothing
            r2 <= 0.2 || (r2 <= 1.0 && blob.at(3.0 * (dy + 1.0), 3.0 * (dx + 1.0)) >= 0.38)
        }
    }
}

pub fn render_snippet(spec: &IdentitySpec, params: &SnippetParams) -> Result<Snippet> {
    let (t, h, w) = (params.t, params.h, params.w);
    if t == 0 || h < 4 || w < 4 {
        return Err(CosamError::arg(format!(
            "snippet geometry {t}x{h}x{w} too small"
        )));
    }
    if !(0.1..=0.4).contains(&spec.size_frac) {
        return Err(CosamError::arg(format!(
            "size_frac {} outside [0.1, 0.4]",
            spec.size_frac
        )));
    }
    let e = spec.size_frac * h.min(w) as f64;
    let (ey, ex) = half_extents(spec.shape, e, h, w);
    // Keep the whole trajectory inside the frame; an object that cannot fit
    // would have to leave it.
    let (my, mx) = (ey + 1.0, ex + 1.0);
    if 2.0 * my >= h as f64 || 2.0 * mx >= w as f64 {
        return Err(CosamError::arg(format!(
            "object (extent {ey:.1}x{ex:.1}) does not fit a {h}x{w} frame without leaving it"
        )));
    }

    let mut rng = substream(params.seed, "snippet");
    let texture = ValueNoise::new(spec.texture_seed, 6);
    let blob = ValueNoise::new(spec.texture_seed ^ 0x5eed, 7);

    // Linear drift; velocity is clipped so the final position stays inside.
    let mut cy = rng.gen_range(my..h as f64 - my);
    let mut cx = rng.gen_range(mx..w as f64 - mx);
    let steps = (t.max(2) - 1) as f64;
    let vy_lim = params
        .max_speed
        .min((h as f64 - my - cy) / steps)
        .min((cy - my) / steps);
    let vx_lim = params
        .max_speed
        .min((w as f64 - mx - cx) / steps)
        .min((cx - mx) / steps);
    let vy = rng.gen_range(-vy_lim..=vy_lim);
    let vx = rng.gen_range(-vx_lim..=vx_lim);

    let occluded = rng.gen::<f64>() < params.occlusion_prob;
    let occ_x0 = rng.gen_range(0.0..w as f64);
    let occ_speed = rng.gen_range(-1.5..1.5);
    let occ_width = rng.gen_range(0.15..0.3) * w as f64;

    let mut frames = Tensor::zeros(&[t, 3, h, w]);
    let mut gts = Tensor::zeros(&[t, h, w]);
    for fi in 0..t {
        let gain = 0.85 + 0.45 * rng.gen::<f64>();
        // background: iid pixel noise plus a few colored patches, all redrawn
        // every frame so nothing in the background repeats across time
        let mut scene = vec![0.0; 3 * h * w];
        for v in scene.iter_mut() {
            *v = 0.12 + params.clutter * rng.gen::<f64>() * 0.75;
        }
        for _ in 0..3 {
            let ph = rng.gen_range(h / 8..h / 2);
            let pw = rng.gen_range(w / 8..w / 2);
            let py = rng.gen_range(0..h - ph);
            let px = rng.gen_range(0..w - pw);
            let val = 0.25 + 0.5 * rng.gen::<f64>();
            let hue = [
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.5..1.0),
            ];
            for c in 0..3 {
                for y in py..py + ph {
                    for x in px..px + pw {
                        scene[(c * h + y) * w + x] = val * hue[c];
                    }
                }
            }
        }

        let occ_left = occ_x0 + occ_speed * fi as f64;
        let occ_hit = |x: usize| {
            occluded && {
                let d = (x as f64 - occ_left).rem_euclid(w as f64);
                d < occ_width
            }
        };

        let mut visible = 0usize;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ey;
                let dx = (x as f64 - cx) / ex;
                if in_support(spec.shape, dy, dx, &blob) {
                    // texture sampled in object coordinates: it travels with
                    // the object, unchanged from frame to frame
                    let tex = texture.at(2.5 * (dy + 1.0), 2.5 * (dx + 1.0));
                    let val = 0.3 + 0.45 * tex;
                    if occ_hit(x) {
                        for c in 0..3 {
                            scene[(c * h + y) * w + x] = 0.35;
                        }
                    } else {
                        for c in 0..3 {
                            scene[(c * h + y) * w + x] = val * spec.hue[c];
                        }
                        gts.data_mut()[(fi * h + y) * w + x] = 1.0;
                        visible += 1;
                    }
                } else if occ_hit(x) {
                    for c in 0..3 {
                        scene[(c * h + y) * w + x] = 0.35;
                    }
                }
            }
        }
        if visible == 0 {
            // the occluder swallowed the object this frame: reveal it so the
            // ground truth is never empty
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - cy) / ey;
                    let dx = (x as f64 - cx) / ex;
                    if in_support(spec.shape, dy, dx, &blob) {
                        let tex = texture.at(2.5 * (dy + 1.0), 2.5 * (dx + 1.0));
                        let val = 0.3 + 0.45 * tex;
                        for c in 0..3 {
                            scene[(c * h + y) * w + x] = val * spec.hue[c];
                        }
                        gts.data_mut()[(fi * h + y) * w + x] = 1.0;
                    }
                }
            }
        }

        let out = &mut frames.data_mut()[fi * 3 * h * w..(fi + 1) * 3 * h * w];
        for (o, s) in out.iter_mut().zip(&scene) {
            *o = (s * gain).min(1.0);
        }
        cy += vy;
        cx += vx;
    }
    Ok(Snippet {
        identity: spec.id,
        frames,
        gt_masks: gts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub snippets_per_id: usize,
    pub params: SnippetParams,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_identities: 16,
            snippets_per_id: 6,
            params: SnippetParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub identities: Vec<IdentitySpec>,
    pub train: Vec<Snippet>,
    pub query: Vec<Snippet>,
    pub gallery: Vec<Snippet>,
}

/// Deterministic split per identity: snippet 0 is a query, snippets 1 (and 2,
/// when there are at least 4) go to the gallery, the rest train.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.snippets_per_id < 3 {
        return Err(CosamError::arg(
            "need at least 3 snippets per identity to split",
        ));
    }
    let identities = gen_identities(cfg.num_identities, cfg.seed)?;
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let gallery_per_id = if cfg.snippets_per_id >= 4 { 2 } else { 1 };
    for spec in &identities {
        for s in 0..cfg.snippets_per_id {
            let mut params = cfg.params.clone();
            params.seed = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((spec.id * 10_000 + s) as u64);
            let snippet = render_snippet(spec, &params)?;
            if s == 0 {
                query.push(snippet);
            } else if s <= gallery_per_id {
                gallery.push(snippet);
            } else {
                train.push(snippet);
            }
        }
    }
    Ok(Dataset {
        identities,
        train,
        query,
        gallery,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FrameSelection {
    /// A random contiguous window.
    Sequential,
    /// Distinct random frames, kept in temporal order.
    Random,
}

pub fn select_frames(
    track_len: usize,
    n: usize,
    selection: FrameSelection,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if n == 0 || n > track_len {
        return Err(CosamError::arg(format!(
            "cannot pick {n} frames from a track of {track_len}"
        )));
    }
    Ok(match selection {
        FrameSelection::Sequential => {
            let start = rng.gen_range(0..=track_len - n);
            (start..start + n).collect()
        }
        FrameSelection::Random => {
            let mut all: Vec<usize> = (0..track_len).collect();
            all.shuffle(rng);
            let mut picked: Vec<usize> = all.into_iter().take(n).collect();
            picked.sort_unstable();
            picked
        }
    })
}

/// Copy the chosen frames (and their masks) out of a snippet.
pub fn frames_subset(snippet: &Snippet, indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let shape = snippet.frames.shape();
    let (t, chw) = (shape[0], shape[1] * shape[2] * shape[3]);
    let hw = shape[2] * shape[3];
    let mut frames = Tensor::zeros(&[indices.len(), shape[1], shape[2], shape[3]]);
    let mut masks = Tensor::zeros(&[indices.len(), shape[2], shape[3]]);
    for (row, &idx) in indices.iter().enumerate() {
        if idx >= t {
            return Err(CosamError::arg(format!("frame {idx} out of range 0..{t}")));
        }
        frames.data_mut()[row * chw..(row + 1) * chw]
            .copy_from_slice(&snippet.frames.data()[idx * chw..(idx + 1) * chw]);
        masks.data_mut()[row * hw..(row + 1) * hw]
            .copy_from_slice(&snippet.gt_masks.data()[idx * hw..(idx + 1) * hw]);
    }
    Ok((frames, masks))
}

/// PK sampling: `p` distinct identities, `k` distinct training snippets each.
/// Returns indices into `train` plus their labels.
pub fn sample_batch(
    train: &[Snippet],
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut by_id: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in train.iter().enumerate() {
        match by_id.iter_mut().find(|(id, _)| *id == s.identity) {
            Some((_, v)) => v.push(i),
            None => by_id.push((s.identity, vec![i])),
        }
    }
    let eligible: Vec<usize> = (0..by_id.len()).filter(|&i| by_id[i].1.len() >= k).collect();
    if eligible.len() < p {
        return Err(CosamError::arg(format!(
            "only {} identities have {k} training snippets, need {p}",
            eligible.len()
        )));
    }
    let mut ids = eligible;
    ids.shuffle(rng);
    ids.truncate(p);
    ids.sort_unstable(); // stable batch layout regardless of shuffle order
    let mut batch = Vec::with_capacity(p * k);
    for idx in ids {
        let (label, snippets) = &by_id[idx];
        let mut pool = snippets.clone();
        pool.shuffle(rng);
        for &si in pool.iter().take(k) {
            batch.push((si, *label));
        }
    }
    Ok(batch)
}
