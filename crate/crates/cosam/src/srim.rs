//! Salient-Region Interaction Module: pixels are softly assigned to a fixed
//! number of per-frame objects, pooled into object descriptors, mixed by
//! temporally-masked multi-head self-attention, redistributed back to pixel
//! space and residual-added to the input.

use rand_chacha::ChaCha8Rng;

use crate::error::{CosamError, Result};
use crate::layers::{Conv1x1Layer, LinearLayer, ParamGroup};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SrimConfig {
    /// Reduced channels (C_L -> C_R).
    pub c_r: usize,
    /// Objects per frame.
    pub n_o: usize,
    /// Attention heads; must divide `c_r`.
    pub heads: usize,
    /// Temporal interaction radius: token (t, .) attends to frames within
    /// `|t - t'| <= window`.
    pub window: usize,
}

impl Default for SrimConfig {
    fn default() -> Self {
        SrimConfig {
            c_r: 512,
            n_o: 5,
            heads: 8,
            window: 1,
        }
    }
}

impl SrimConfig {
    pub fn validate(&self, c_l: usize) -> Result<()> {
        if self.c_r >= c_l {
            return Err(CosamError::config(format!(
                "c_r ({}) must be smaller than input channels ({c_l})",
                self.c_r
            )));
        }
        if self.n_o == 0 {
            return Err(CosamError::config("n_o must be at least 1"));
        }
        if self.heads == 0 || self.c_r % self.heads != 0 {
            return Err(CosamError::config(format!(
                "heads ({}) must divide c_r ({})",
                self.heads, self.c_r
            )));
        }
        Ok(())
    }
}

/// Soft object assignment: conv to `n_o` channels then spatial softmax,
/// yielding `[T, N_o, H*W]` with each (t, o) row summing to 1.
pub fn object_association(
    tape: &mut Tape,
    assoc_conv: &Conv1x1Layer,
    f_red: Var,
) -> Result<Var> {
    let shape = tape.shape(f_red).to_vec();
    if shape.len() != 4 {
        return Err(CosamError::shape(format!(
            "object_association input {shape:?}"
        )));
    }
    let (t, h, w) = (shape[0], shape[2], shape[3]);
    let logits = assoc_conv.forward(tape, f_red)?;
    let n_o = tape.shape(logits)[1];
    let flat = ops::reshape(tape, logits, vec![t, n_o, h * w])?;
    ops::softmax(tape, flat, 2)
}

/// Weighted average pooling of pixel descriptors into object descriptors:
/// `values[t,o,c] = sum_hw assoc[t,o,hw] * f_red[t,c,hw]`.
pub fn weighted_avg_pool(tape: &mut Tape, f_red: Var, assoc: Var) -> Result<Var> {
    let fs = tape.shape(f_red).to_vec();
    let as_ = tape.shape(assoc).to_vec();
    if fs.len() != 4 || as_.len() != 3 || fs[0] != as_[0] || fs[2] * fs[3] != as_[2] {
        return Err(CosamError::shape(format!(
            "weighted_avg_pool: features {fs:?} vs association {as_:?}"
        )));
    }
    let (t, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
    let flat = ops::reshape(tape, f_red, vec![t, c, hw])?;
    let pix = ops::permute3(tape, flat, [0, 2, 1])?; // [T, HW, C]
    ops::bmm(tape, assoc, pix) // [T, N_o, C]
}

/// Additive attention mask over the `T*N_o` token sequence: 0 where frames
/// are within `window`, a large negative number elsewhere. With
/// `window >= T-1` the mask is all zeros, making masked attention bit-equal
/// to the unmasked computation.
pub fn temporal_mask(t: usize, n_o: usize, window: usize) -> Tensor {
    let s = t * n_o;
    let mut m = Tensor::zeros(&[s, s]);
    for a in 0..s {
        let ta = a / n_o;
        for b in 0..s {
            let tb = b / n_o;
            if ta.abs_diff(tb) > window {
                m.data_mut()[a * s + b] = -1e30;
            }
        }
    }
    m
}

/// Multi-head self-attention over object tokens.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            wq: LinearLayer::new(&format!("{name}.wq"), dim, dim, rng),
            wk: LinearLayer::new(&format!("{name}.wk"), dim, dim, rng),
            wv: LinearLayer::new(&format!("{name}.wv"), dim, dim, rng),
            wo: LinearLayer::new(&format!("{name}.wo"), dim, dim, rng),
            heads: heads,
        }
    }

    /// `tokens: [S, C]`, additive `mask: [S, S]`; returns `[S, C]`.
    pub fn forward(&self, tape: &mut Tape, tokens: Var, mask: &Tensor) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        let (s, c) = (shape[0], shape[1]);
        if c % self.heads != 0 {
            return Err(CosamError::config(format!(
                "heads ({}) must divide token dim ({c})",
                self.heads
            )));
        }
        let dh = c / self.heads;
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let r = ops::reshape(tape, x, vec![s, self.heads, dh])?;
            ops::permute3(tape, r, [1, 0, 2]) // [heads, S, dh]
        };
        let q = self.wq.forward(tape, tokens)?;
        let k = self.wk.forward(tape, tokens)?;
        let v = self.wv.forward(tape, tokens)?;
        let q = split(tape, q)?;
        let k = split(tape, k)?;
        let v = split(tape, v)?;
        let kt = ops::permute3(tape, k, [0, 2, 1])?; // [heads, dh, S]
        let scores = ops::bmm(tape, q, kt)?; // [heads, S, S]
        let scores = ops::scale(tape, scores, 1.0 / (dh as f64).sqrt());
        let scores = ops::add_const_broadcast0(tape, scores, mask)?;
        let attn = ops::softmax(tape, scores, 2)?;
        let mixed = ops::bmm(tape, attn, v)?; // [heads, S, dh]
        let merged = ops::permute3(tape, mixed, [1, 0, 2])?; // [S, heads, dh]
        let merged = ops::reshape(tape, merged, vec![s, c])?;
        self.wo.forward(tape, merged)
    }
}

impl ParamGroup for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
    }
}

/// The full module.
#[derive(Debug, Clone)]
pub struct Srim {
    pub reduce: Conv1x1Layer,
    pub assoc: Conv1x1Layer,
    pub mhsa: MultiHeadAttention,
    pub expand: Conv1x1Layer,
    pub cfg: SrimConfig,
}

pub struct SrimOutput {
    pub features: Var,
    /// `[T, N_o, H*W]` spatial distributions, exportable as association maps.
    pub association: Var,
}

impl Srim {
    pub fn new(name: &str, c_l: usize, cfg: &SrimConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate(c_l)?;
        Ok(Srim {
            reduce: Conv1x1Layer::new(&format!("{name}.reduce"), c_l, cfg.c_r, rng),
            assoc: Conv1x1Layer::new(&format!("{name}.assoc"), cfg.c_r, cfg.n_o, rng),
            mhsa: MultiHeadAttention::new(&format!("{name}.mhsa"), cfg.c_r, cfg.heads, rng),
            // Zero init keeps the residual branch silent at the start, so the
            // whole module is the identity until training opens it up.
            expand: Conv1x1Layer::zeroed(&format!("{name}.expand"), cfg.c_r, c_l),
            cfg: cfg.clone(),
        })
    }

    /// Map attended object descriptors back to pixels using the (transposed)
    /// association weights, then expand channels.
    pub fn redistribute(&self, tape: &mut Tape, attended: Var, assoc: Var, h: usize, w: usize) -> Result<Var> {
        let at = ops::permute3(tape, attended, [0, 2, 1])?; // [T, C_R, N_o]
        let pix = ops::bmm(tape, at, assoc)?; // [T, C_R, HW]
        let t = tape.shape(pix)[0];
        let c_r = tape.shape(pix)[1];
        let pix = ops::reshape(tape, pix, vec![t, c_r, h, w])?;
        self.expand.forward(tape, pix)
    }

    pub fn forward(&self, tape: &mut Tape, f_co: Var) -> Result<SrimOutput> {
        let shape = tape.shape(f_co).to_vec();
        if shape.len() != 4 {
            return Err(CosamError::shape(format!("srim input {shape:?}")));
        }
        let (t, h, w) = (shape[0], shape[2], shape[3]);
        let f_red = self.reduce.forward(tape, f_co)?;
        let assoc = object_association(tape, &self.assoc, f_red)?;
        let objects = weighted_avg_pool(tape, f_red, assoc)?; // [T, N_o, C_R]
        let tokens = ops::reshape(tape, objects, vec![t * self.cfg.n_o, self.cfg.c_r])?;
        let mask = temporal_mask(t, self.cfg.n_o, self.cfg.window);
        let attended = self.mhsa.forward(tape, tokens, &mask)?;
        let attended = ops::reshape(tape, attended, vec![t, self.cfg.n_o, self.cfg.c_r])?;
        let redistributed = self.redistribute(tape, attended, assoc, h, w)?;
        let features = ops::add(tape, f_co, redistributed)?;
        Ok(SrimOutput {
            features,
            association: assoc,
        })
    }
}

impl ParamGroup for Srim {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        self.reduce.visit(f);
        self.assoc.visit(f);
        self.mhsa.visit(f);
        self.expand.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        self.reduce.visit_mut(f);
        self.assoc.visit_mut(f);
        self.mhsa.visit_mut(f);
        self.expand.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, rng_from_seed};
    use crate::tape::grad_check;

    fn toy_cfg() -> SrimConfig {
        SrimConfig {
            c_r: 4,
            n_o: 2,
            heads: 2,
            window: 1,
        }
    }

    #[test]
    fn association_rows_are_distributions() {
        let mut rng = rng_from_seed(0);
        let conv = Conv1x1Layer::new("assoc", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let f = tape.leaf(normal_tensor(&[2, 4, 3, 3], 1));
        let a = object_association(&mut tape, &conv, f).unwrap();
        assert_eq!(tape.shape(a), &[2, 2, 9]);
        let av = tape.value(a).data();
        for row in 0..4 {
            let s: f64 = av[row * 9..(row + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(av[row * 9..(row + 1) * 9].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn association_uniform_for_constant_logits() {
        let conv = Conv1x1Layer::zeroed("assoc", 4, 2);
        let mut tape = Tape::new();
        let f = tape.leaf(normal_tensor(&[1, 4, 2, 2], 2));
        let a = object_association(&mut tape, &conv, f).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn association_gradcheck() {
        let x = normal_tensor(&[2, 4, 3, 3], 3);
        let err = grad_check(
            &|tape, x| {
                let mut rng = rng_from_seed(1);
                let conv = Conv1x1Layer::new("assoc", 4, 2, &mut rng);
                let a = object_association(tape, &conv, x)?;
                let sq = ops::mul(tape, a, a)?;
                Ok(ops::sum(tape, sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wap_constant_features_and_delta_weights() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::full(&[1, 3, 2, 2], 7.5));
        let mut a = Tensor::zeros(&[1, 2, 4]);
        // object 0: uniform; object 1: one-hot at pixel 2
        for p in 0..4 {
            a.data_mut()[p] = 0.25;
        }
        a.data_mut()[4 + 2] = 1.0;
        let a = tape.leaf(a);
        let out = weighted_avg_pool(&mut tape, f, a).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 3]);
        for &v in tape.value(out).data() {
            assert!((v - 7.5).abs() < 1e-12);
        }

        // one-hot picks out the pixel descriptor exactly
        let f2 = tape.leaf(normal_tensor(&[1, 3, 2, 2], 4));
        let mut a2 = Tensor::zeros(&[1, 1, 4]);
        a2.data_mut()[1] = 1.0;
        let a2 = tape.leaf(a2);
        let out2 = weighted_avg_pool(&mut tape, f2, a2).unwrap();
        let fv = tape.value(f2).data();
        let ov = tape.value(out2).data();
        for c in 0..3 {
            assert!((ov[c] - fv[c * 4 + 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn wap_matches_scalar_oracle() {
        let mut tape = Tape::new();
        let f = tape.leaf(normal_tensor(&[2, 3, 2, 2], 5));
        let mut rng = rng_from_seed(2);
        let conv = Conv1x1Layer::new("assoc", 3, 2, &mut rng);
        let a = object_association(&mut tape, &conv, f).unwrap();
        let out = weighted_avg_pool(&mut tape, f, a).unwrap();
        let (fv, av, ov) = (
            tape.value(f).data().to_vec(),
            tape.value(a).data().to_vec(),
            tape.value(out).data().to_vec(),
        );
        for t in 0..2 {
            for o in 0..2 {
                for c in 0..3 {
                    let mut want = 0.0;
                    for p in 0..4 {
                        want += av[(t * 2 + o) * 4 + p] * fv[(t * 3 + c) * 4 + p];
                    }
                    let got = ov[(t * 2 + o) * 3 + c];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wap_output_in_convex_hull() {
        let mut tape = Tape::new();
        let f = tape.leaf(normal_tensor(&[2, 3, 3, 3], 6));
        let mut rng = rng_from_seed(3);
        let conv = Conv1x1Layer::new("assoc", 3, 2, &mut rng);
        let a = object_association(&mut tape, &conv, f).unwrap();
        let out = weighted_avg_pool(&mut tape, f, a).unwrap();
        let (fv, ov) = (tape.value(f).data(), tape.value(out).data());
        for t in 0..2 {
            for c in 0..3 {
                let pixels = &fv[(t * 3 + c) * 9..(t * 3 + c + 1) * 9];
                let lo = pixels.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for o in 0..2 {
                    let v = ov[(t * 2 + o) * 3 + c];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_mhsa_full_window_equals_unmasked() {
        let mut rng = rng_from_seed(4);
        let mha = MultiHeadAttention::new("mhsa", 4, 2, &mut rng);
        let tokens = normal_tensor(&[6, 4], 7); // T=3, N_o=2
        let run = |mask: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(tokens.clone());
            let y = mha.forward(&mut tape, x, mask).unwrap();
            tape.value(y).data().to_vec()
        };
        let full = temporal_mask(3, 2, 3);
        let zero = Tensor::zeros(&[6, 6]);
        assert_eq!(run(&full), run(&zero));
        // window >= T-1 also removes the mask entirely
        assert_eq!(temporal_mask(3, 2, 2).data(), Tensor::zeros(&[6, 6]).data());
    }

    #[test]
    fn masked_mhsa_rows_renormalize_over_allowed() {
        // Inspect the attention distribution via a direct rebuild.
        let mut tape = Tape::new();
        let s = 6;
        let scores = tape.leaf(normal_tensor(&[2, s, s], 8));
        let mask = temporal_mask(3, 2, 0);
        let masked = ops::add_const_broadcast0(&mut tape, scores, &mask).unwrap();
        let attn = ops::softmax(&mut tape, masked, 2).unwrap();
        let av = tape.value(attn).data();
        for h in 0..2 {
            for a in 0..s {
                let ta = a / 2;
                let mut allowed_sum = 0.0;
                for b in 0..s {
                    let v = av[(h * s + a) * s + b];
                    if b / 2 == ta {
                        allowed_sum += v;
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
                assert!((allowed_sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_frame_attends_over_all_objects() {
        let mask = temporal_mask(1, 4, 1);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn srim_identity_at_init() {
        let mut rng = rng_from_seed(5);
        let srim = Srim::new("srim", 8, &toy_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(normal_tensor(&[3, 8, 3, 3], 9));
        let out = srim.forward(&mut tape, f).unwrap();
        assert_eq!(tape.value(out.features), tape.value(f));
    }

    #[test]
    fn srim_shape_preserved_when_live() {
        let mut rng = rng_from_seed(6);
        let mut srim = Srim::new("srim", 8, &toy_cfg(), &mut rng).unwrap();
        srim.expand = Conv1x1Layer::new("srim.expand", 4, 8, &mut rng);
        let mut tape = Tape::new();
        let f = tape.leaf(normal_tensor(&[5, 8, 4, 3], 10));
        let out = srim.forward(&mut tape, f).unwrap();
        assert_eq!(tape.shape(out.features), &[5, 8, 4, 3]);
        assert_ne!(tape.value(out.features), tape.value(f));
    }

    #[test]
    fn redistribute_uniform_association_hand_case() {
        // Uniform association + identical object features v: each pixel gets
        // n_o * (1/hw) * v before expansion.
        let mut rng = rng_from_seed(7);
        let mut srim = Srim::new("srim", 8, &toy_cfg(), &mut rng).unwrap();
        // identity-ish expansion to observe the pre-expansion sum: use a
        // zero bias, single-channel probe instead.
        srim.expand = Conv1x1Layer::zeroed("srim.expand", 4, 8);
        srim.expand.weight.data_mut()[0] = 1.0; // out ch 0 = in ch 0
        let mut tape = Tape::new();
        let hw = 4.0;
        let attended = tape.leaf(Tensor::full(&[1, 2, 4], 3.0)); // v = 3 for all objects
        let assoc = tape.leaf(Tensor::full(&[1, 2, 4], 1.0 / hw));
        let out = srim.redistribute(&mut tape, attended, assoc, 2, 2).unwrap();
        let want = 2.0 * (1.0 / hw) * 3.0; // n_o * (1/hw) * v
        for p in 0..4 {
            assert!((tape.value(out).data()[p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn srim_end_to_end_gradcheck() {
        let x = normal_tensor(&[3, 8, 3, 3], 11);
        let err = grad_check(
            &|tape, x| {
                let mut rng = rng_from_seed(8);
                let mut srim = Srim::new("srim", 8, &toy_cfg(), &mut rng).unwrap();
                srim.expand = Conv1x1Layer::new("srim.expand", 4, 8, &mut rng);
                for v in srim.expand.weight.data_mut() {
                    *v *= 0.3;
                }
                let out = srim.forward(tape, x)?;
                let sq = ops::mul(tape, out.features, out.features)?;
                Ok(ops::sum(tape, sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
