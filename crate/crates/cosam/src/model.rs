//! A small strided CNN host for the attention modules, with a retrieval head
//! (embedding + identity classifier) and a two-branch variant for mutual
//! learning.

use rand_chacha::ChaCha8Rng;

use crate::cosam::{Cosam, CosamConfig};
use crate::error::{CosamError, Result};
use crate::layers::{BatchNorm2dLayer, Conv3x3Layer, LinearLayer, ParamGroup};
use crate::losses;
use crate::nn::{self, Mode};
use crate::ops;
use crate::srim::{Srim, SrimConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalAgg {
    /// Plain average over frames.
    Average,
    /// Learned softmax attention over per-frame scores.
    Attention,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels per backbone block; each block halves H and W.
    pub channels: Vec<usize>,
    /// Input resolution, fixed up front because the cost-volume summary conv
    /// width depends on the feature-map size at each insertion site.
    pub input_hw: (usize, usize),
    /// Blocks after which a co-segmentation module sits (1-based).
    pub cosam_sites: Vec<usize>,
    pub cosam: CosamConfig,
    /// Blocks after which an interaction module sits (1-based).
    pub srim_sites: Vec<usize>,
    pub srim: SrimConfig,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub temporal: TemporalAgg,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            channels: vec![8, 16, 32, 64],
            input_hw: (64, 32),
            cosam_sites: vec![3, 4],
            cosam: CosamConfig::default(),
            srim_sites: vec![],
            srim: SrimConfig::default(),
            embed_dim: 128,
            num_classes: 16,
            temporal: TemporalAgg::Average,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(CosamError::config("backbone needs at least one block"));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.num_classes < 2 {
            return Err(CosamError::config(
                "in_channels and embed_dim must be positive, num_classes at least 2",
            ));
        }
        for sites in [&self.cosam_sites, &self.srim_sites] {
            for &s in sites {
                if s == 0 || s > self.channels.len() {
                    return Err(CosamError::config(format!(
                        "insertion site {s} outside 1..={}",
                        self.channels.len()
                    )));
                }
            }
            let mut sorted = sites.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != sites.len() {
                return Err(CosamError::config("duplicate insertion site"));
            }
        }
        Ok(())
    }

    /// Feature-map size after `block` blocks (1-based; 0 = input). Each block
    /// is stride 2 with padding 1, so dimensions round up when halving.
    pub fn hw_after(&self, block: usize) -> (usize, usize) {
        let (mut h, mut w) = self.input_hw;
        for _ in 0..block {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        (h, w)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv3x3Layer,
    bn: BatchNorm2dLayer,
}

/// One retrieval branch: backbone with optional attention modules, a frame
/// embedding head, temporal aggregation and an identity classifier.
pub struct Model {
    blocks: Vec<Block>,
    cosams: Vec<(usize, Cosam)>,
    srims: Vec<(usize, Srim)>,
    embed: LinearLayer,
    score: LinearLayer,
    classifier: LinearLayer,
    pub cfg: ModelConfig,
}

pub struct SnippetOutput {
    /// Aggregated snippet embedding, `[embed_dim]`.
    pub embedding: Var,
    /// Identity logits, `[num_classes]`.
    pub logits: Var,
    /// Spatial attention masks per co-segmentation site, `[N,1,h,w]`.
    pub masks: Vec<(usize, Var)>,
}

impl Model {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            blocks.push(Block {
                conv: Conv3x3Layer::new(&format!("{name}.block{i}.conv"), c_in, c_out, 2, rng),
                bn: BatchNorm2dLayer::new(&format!("{name}.block{i}.bn"), c_out),
            });
            c_in = c_out;
        }
        let mut cosams = Vec::new();
        for &site in &cfg.cosam_sites {
            let d = cfg.channels[site - 1];
            let (h, w) = cfg.hw_after(site);
            // Reduction widths track the host: never wider than half the
            // channels at the site.
            let mut site_cfg = cfg.cosam.clone();
            site_cfg.d_r = site_cfg.d_r.min(d / 2).max(1);
            site_cfg.mlp_hidden = Some(site_cfg.hidden().min(d / 2).max(1));
            cosams.push((
                site,
                Cosam::new(&format!("{name}.cosam{site}"), d, h, w, &site_cfg, rng)?,
            ));
        }
        let mut srims = Vec::new();
        for &site in &cfg.srim_sites {
            let c_l = cfg.channels[site - 1];
            let mut site_cfg = cfg.srim.clone();
            site_cfg.c_r = site_cfg.c_r.min(c_l / 2).max(1);
            while site_cfg.c_r % site_cfg.heads != 0 && site_cfg.heads > 1 {
                site_cfg.heads /= 2;
            }
            srims.push((
                site,
                Srim::new(&format!("{name}.srim{site}"), c_l, &site_cfg, rng)?,
            ));
        }
        let last = *cfg.channels.last().unwrap();
        Ok(Model {
            blocks,
            cosams,
            srims,
            embed: LinearLayer::new(&format!("{name}.embed"), last, cfg.embed_dim, rng),
            // Zero scores start attention aggregation at the plain average.
            score: LinearLayer::zeroed(&format!("{name}.score"), cfg.embed_dim, 1),
            classifier: LinearLayer::new(
                &format!("{name}.classifier"),
                cfg.embed_dim,
                cfg.num_classes,
                rng,
            ),
            cfg: cfg.clone(),
        })
    }

    /// Backbone pass over one snippet `[N, C_in, H, W]`, applying attention
    /// modules at their sites. Returns final features and collected masks.
    pub fn features(
        &mut self,
        tape: &mut Tape,
        snippet: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let shape = tape.shape(snippet).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(CosamError::shape(format!(
                "snippet {shape:?}, expected [N, {}, H, W]",
                self.cfg.in_channels
            )));
        }
        if (shape[2], shape[3]) != self.cfg.input_hw {
            return Err(CosamError::shape(format!(
                "snippet {}x{} but model built for {}x{}",
                shape[2], shape[3], self.cfg.input_hw.0, self.cfg.input_hw.1
            )));
        }
        let mut x = snippet;
        let mut masks = Vec::new();
        for i in 0..self.blocks.len() {
            let block = &mut self.blocks[i];
            let c = block.conv.forward(tape, x)?;
            let b = block.bn.forward(tape, c, mode)?;
            x = ops::relu(tape, b);
            let site = i + 1;
            if let Some((_, cosam)) = self.cosams.iter_mut().find(|(s, _)| *s == site) {
                let out = cosam.forward(tape, x, mode)?;
                x = out.features;
                if let Some(m) = out.mask {
                    masks.push((site, m));
                }
            }
            if let Some((_, srim)) = self.srims.iter_mut().find(|(s, _)| *s == site) {
                x = srim.forward(tape, x)?.features;
            }
        }
        Ok((x, masks))
    }

    /// Collapse per-frame embeddings `[N, E]` into one snippet vector `[E]`.
    pub fn temporal_aggregate(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        match self.cfg.temporal {
            TemporalAgg::Average => ops::mean_rows(tape, frames),
            TemporalAgg::Attention => {
                let n = tape.shape(frames)[0];
                let e = tape.shape(frames)[1];
                let scores = self.score.forward(tape, frames)?; // [N, 1]
                let scores = ops::reshape(tape, scores, vec![1, n])?;
                let weights = ops::softmax(tape, scores, 1)?;
                let pooled = ops::matmul2(tape, weights, frames)?; // [1, E]
                ops::reshape(tape, pooled, vec![e])
            }
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, snippet: Var, mode: Mode) -> Result<SnippetOutput> {
        let (feat, masks) = self.features(tape, snippet, mode)?;
        let pooled = nn::global_avg_pool(tape, feat)?; // [N, C]
        let per_frame = self.embed.forward(tape, pooled)?; // [N, E]
        let embedding = self.temporal_aggregate(tape, per_frame)?; // [E]
        let e = self.cfg.embed_dim;
        let row = ops::reshape(tape, embedding, vec![1, e])?;
        let logits = self.classifier.forward(tape, row)?;
        let logits = ops::reshape(tape, logits, vec![self.cfg.num_classes])?;
        Ok(SnippetOutput {
            embedding,
            logits,
            masks,
        })
    }
}

impl ParamGroup for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, bool)) {
        for b in &self.blocks {
            b.conv.visit(f);
            b.bn.visit(f);
        }
        for (_, c) in &self.cosams {
            c.visit(f);
        }
        for (_, s) in &self.srims {
            s.visit(f);
        }
        self.embed.visit(f);
        self.score.visit(f);
        self.classifier.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, bool)) {
        for b in &mut self.blocks {
            b.conv.visit_mut(f);
            b.bn.visit_mut(f);
        }
        for (_, c) in &mut self.cosams {
            c.visit_mut(f);
        }
        for (_, s) in &mut self.srims {
            s.visit_mut(f);
        }
        self.embed.visit_mut(f);
        self.score.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

/// Two branches evaluated on the same snippet for mutual learning. Returns
/// (output_p, output_q, loss) where the loss couples the branches through a
/// KL term on their class distributions.
pub fn two_branch_forward(
    tape: &mut Tape,
    branch_p: &mut Model,
    branch_q: &mut Model,
    snippets: &[Var],
    labels: &[usize],
    mode: Mode,
    lambda_q: f64,
    lambda_kl: f64,
) -> Result<(Var, Var, Var)> {
    if snippets.len() != labels.len() || snippets.is_empty() {
        return Err(CosamError::arg(format!(
            "two_branch_forward: {} snippets, {} labels",
            snippets.len(),
            labels.len()
        )));
    }
    let mut logits_p = Vec::new();
    let mut logits_q = Vec::new();
    for &s in snippets {
        logits_p.push(branch_p.forward(tape, s, mode)?.logits);
        logits_q.push(branch_q.forward(tape, s, mode)?.logits);
    }
    let lp = ops::stack_rows(tape, &logits_p)?;
    let lq = ops::stack_rows(tape, &logits_q)?;
    let loss = losses::distill_loss(tape, lp, lq, labels, lambda_q, lambda_kl)?;
    Ok((lp, lq, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, rng_from_seed};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            channels: vec![4, 8],
            input_hw: (8, 8),
            cosam_sites: vec![2],
            cosam: CosamConfig {
                d_r: 4,
                k: 2,
                ..CosamConfig::default()
            },
            srim_sites: vec![],
            srim: SrimConfig::default(),
            embed_dim: 6,
            num_classes: 3,
            temporal: TemporalAgg::Average,
        }
    }

    #[test]
    fn stride_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.hw_after(0), (64, 32));
        assert_eq!(cfg.hw_after(1), (32, 16));
        assert_eq!(cfg.hw_after(3), (8, 4));
        assert_eq!(cfg.hw_after(4), (4, 2));
        let odd = ModelConfig {
            input_hw: (7, 5),
            ..ModelConfig::default()
        };
        assert_eq!(odd.hw_after(1), (4, 3));
        assert_eq!(odd.hw_after(2), (2, 2));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.cosam_sites = vec![3];
        assert!(cfg.validate().is_err());
        cfg.cosam_sites = vec![0];
        assert!(cfg.validate().is_err());
        cfg.cosam_sites = vec![1, 1];
        assert!(cfg.validate().is_err());
        cfg.cosam_sites = vec![1, 2];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn forward_shapes_with_and_without_modules() {
        for sites in [vec![], vec![1], vec![1, 2]] {
            let cfg = ModelConfig {
                cosam_sites: sites.clone(),
                srim_sites: if sites.is_empty() { vec![2] } else { vec![] },
                ..tiny_cfg()
            };
            let mut rng = rng_from_seed(0);
            let mut model = Model::new("m", &cfg, &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(normal_tensor(&[3, 2, 8, 8], 1));
            let out = model.forward(&mut tape, x, Mode::Train).unwrap();
            assert_eq!(tape.shape(out.embedding), &[6]);
            assert_eq!(tape.shape(out.logits), &[3]);
            assert_eq!(out.masks.len(), sites.len());
            for (site, m) in &out.masks {
                let (h, w) = cfg.hw_after(*site);
                assert_eq!(tape.shape(*m), &[3, 1, h, w]);
            }
        }
    }

    #[test]
    fn rejects_wrong_resolution() {
        let mut rng = rng_from_seed(0);
        let mut model = Model::new("m", &tiny_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(normal_tensor(&[3, 2, 8, 4], 1));
        assert!(model.forward(&mut tape, x, Mode::Train).is_err());
    }

    #[test]
    fn zero_score_attention_equals_average() {
        let cfg_avg = tiny_cfg();
        let cfg_attn = ModelConfig {
            temporal: TemporalAgg::Attention,
            ..tiny_cfg()
        };
        let x = normal_tensor(&[3, 2, 8, 8], 5);
        let run = |cfg: &ModelConfig| {
            let mut rng = rng_from_seed(7);
            let mut model = Model::new("m", cfg, &mut rng).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = model.forward(&mut tape, xv, Mode::Eval).unwrap();
            tape.value(out.embedding).data().to_vec()
        };
        let (a, b) = (run(&cfg_avg), run(&cfg_attn));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn mask_parameters_receive_gradient() {
        let mut rng = rng_from_seed(2);
        let mut model = Model::new("m", &tiny_cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(normal_tensor(&[3, 2, 8, 8], 6));
        let out = model.forward(&mut tape, x, Mode::Train).unwrap();
        let row = ops::reshape(&mut tape, out.logits, vec![1, 3]).unwrap();
        let loss = losses::cross_entropy(&mut tape, row, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let summary = tape
            .bindings()
            .iter()
            .find(|(n, _)| n == "m.cosam2.spatial.summary.weight")
            .map(|(_, v)| *v)
            .unwrap();
        let g = tape.grad(summary);
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn end_to_end_gradcheck_through_input() {
        let x = normal_tensor(&[3, 2, 8, 8], 8);
        let err = crate::tape::grad_check(
            &|tape, x| {
                let mut rng = rng_from_seed(4);
                let mut model = Model::new("m", &tiny_cfg(), &mut rng).unwrap();
                let out = model.forward(tape, x, Mode::Train)?;
                let sq = ops::mul(tape, out.embedding, out.embedding)?;
                Ok(ops::sum(tape, sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn weight_tied_branches_have_zero_kl() {
        let cfg = tiny_cfg();
        let mut rng_p = rng_from_seed(9);
        let mut rng_q = rng_from_seed(9);
        let mut p = Model::new("p", &cfg, &mut rng_p).unwrap();
        let mut q = Model::new("q", &cfg, &mut rng_q).unwrap();
        let mut tape = Tape::new();
        let s0 = tape.leaf(normal_tensor(&[3, 2, 8, 8], 10));
        let s1 = tape.leaf(normal_tensor(&[3, 2, 8, 8], 11));
        let (lp, lq, _) =
            two_branch_forward(&mut tape, &mut p, &mut q, &[s0, s1], &[0, 1], Mode::Eval, 1.0, 1.0)
                .unwrap();
        assert_eq!(tape.value(lp), tape.value(lq));
        let kl = losses::kl_divergence(&mut tape, lp, lq).unwrap();
        assert!(tape.value(kl).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_branch_gradient_reaches_both() {
        let cfg = tiny_cfg();
        let mut rng = rng_from_seed(12);
        let mut p = Model::new("p", &cfg, &mut rng).unwrap();
        let mut q = Model::new("q", &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let s0 = tape.leaf(normal_tensor(&[3, 2, 8, 8], 13));
        let s1 = tape.leaf(normal_tensor(&[3, 2, 8, 8], 14));
        let (_, _, loss) =
            two_branch_forward(&mut tape, &mut p, &mut q, &[s0, s1], &[0, 1], Mode::Train, 1.0, 1.0)
                .unwrap();
        tape.backward(loss).unwrap();
        for prefix in ["p.", "q."] {
            let mut saw_nonzero = false;
            for (name, var) in tape.bindings() {
                if name.starts_with(prefix) && name.ends_with("conv.weight") {
                    if tape.grad(*var).data().iter().any(|&v| v != 0.0) {
                        saw_nonzero = true;
                    }
                }
            }
            assert!(saw_nonzero, "no gradient reached branch {prefix}");
        }
    }
}
