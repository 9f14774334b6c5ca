//! Central-finite-difference audit of every differentiable operation and
//! composite block, at several seeds each. The CLI `gradcheck` command and
//! the integration suite both run this.

use crate::cosam::{self, Cosam, CosamConfig};
use crate::error::Result;
use crate::layers::{BatchNorm2dLayer, Conv1x1Layer};
use crate::losses;
use crate::model::{Model, ModelConfig, TemporalAgg};
use crate::nn::{self, Mode};
use crate::ops;
use crate::rng::{normal_tensor, rng_from_seed};
use crate::srim::{Srim, SrimConfig};
use crate::tape::{grad_check, grad_check_multi, Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const SEEDS: [u64; 3] = [11, 23, 47];

#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub name: String,
    pub max_rel_err: f64,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Reduce any tensor output to a scalar with nonconstant gradient.
fn squared_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = ops::mul(tape, v, v)?;
    Ok(ops::sum(tape, sq))
}

fn check(
    entries: &mut Vec<AuditEntry>,
    name: &str,
    shape: &[usize],
    f: &dyn Fn(&mut Tape, Var, u64) -> Result<Var>,
) -> Result<()> {
    let mut worst: f64 = 0.0;
    for (i, &seed) in SEEDS.iter().enumerate() {
        let x = normal_tensor(shape, seed.wrapping_mul(7919).wrapping_add(i as u64));
        let err = grad_check(&|t, v| f(t, v, seed), &x, EPS)?;
        worst = worst.max(err);
    }
    entries.push(AuditEntry {
        name: name.to_string(),
        max_rel_err: worst,
    });
    Ok(())
}

fn check_multi(
    entries: &mut Vec<AuditEntry>,
    name: &str,
    shapes: &[&[usize]],
    f: &dyn Fn(&mut Tape, &[Var], u64) -> Result<Var>,
) -> Result<()> {
    let mut worst: f64 = 0.0;
    for (i, &seed) in SEEDS.iter().enumerate() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| {
                normal_tensor(
                    s,
                    seed.wrapping_mul(104_729)
                        .wrapping_add((i * 31 + j) as u64),
                )
            })
            .collect();
        let err = grad_check_multi(&|t, vs| f(t, vs, seed), &inputs, EPS)?;
        worst = worst.max(err);
    }
    entries.push(AuditEntry {
        name: name.to_string(),
        max_rel_err: worst,
    });
    Ok(())
}

/// Run the whole audit. Entries exceeding [`TOLERANCE`] mean failure.
pub fn run_audit() -> Result<Vec<AuditEntry>> {
    let mut e = Vec::new();

    // elementwise and reduction primitives
    check_multi(&mut e, "add", &[&[3, 4], &[3, 4]], &|t, vs, _| {
        let y = ops::add(t, vs[0], vs[1])?;
        squared_sum(t, y)
    })?;
    check_multi(&mut e, "sub", &[&[3, 4], &[3, 4]], &|t, vs, _| {
        let y = ops::sub(t, vs[0], vs[1])?;
        squared_sum(t, y)
    })?;
    check_multi(&mut e, "mul", &[&[3, 4], &[3, 4]], &|t, vs, _| {
        let y = ops::mul(t, vs[0], vs[1])?;
        ops::mean(t, y);
        squared_sum(t, y)
    })?;
    check(&mut e, "scale", &[2, 5], &|t, x, _| {
        let y = ops::scale(t, x, -1.7);
        squared_sum(t, y)
    })?;
    check(&mut e, "sum", &[2, 5], &|t, x, _| {
        let y = ops::sum(t, x);
        squared_sum(t, y)
    })?;
    check(&mut e, "mean", &[2, 5], &|t, x, _| {
        let y = ops::mean(t, x);
        squared_sum(t, y)
    })?;
    check(&mut e, "relu", &[4, 5], &|t, x, _| {
        // shift away from the kink at 0
        let s = t.constant(Tensor::full(&[4, 5], 0.31));
        let x = ops::add(t, x, s)?;
        let y = ops::relu(t, x);
        squared_sum(t, y)
    })?;
    check(&mut e, "sigmoid", &[4, 5], &|t, x, _| {
        let y = ops::sigmoid(t, x);
        squared_sum(t, y)
    })?;
    check(&mut e, "softmax", &[3, 6], &|t, x, _| {
        let y = ops::softmax(t, x, 1)?;
        squared_sum(t, y)
    })?;
    check(&mut e, "log_softmax", &[3, 6], &|t, x, _| {
        let y = ops::log_softmax(t, x, 1)?;
        squared_sum(t, y)
    })?;
    check(&mut e, "reshape", &[2, 3, 4], &|t, x, _| {
        let y = ops::reshape(t, x, vec![4, 6])?;
        squared_sum(t, y)
    })?;
    check(&mut e, "permute3", &[2, 3, 4], &|t, x, _| {
        let y = ops::permute3(t, x, [2, 0, 1])?;
        squared_sum(t, y)
    })?;
    check_multi(&mut e, "matmul2", &[&[3, 4], &[4, 2]], &|t, vs, _| {
        let y = ops::matmul2(t, vs[0], vs[1])?;
        squared_sum(t, y)
    })?;
    check_multi(&mut e, "bmm", &[&[2, 3, 4], &[2, 4, 2]], &|t, vs, _| {
        let y = ops::bmm(t, vs[0], vs[1])?;
        squared_sum(t, y)
    })?;
    check(&mut e, "add_const_broadcast0", &[2, 3, 3], &|t, x, s| {
        let c = normal_tensor(&[3, 3], s + 5000);
        let y = ops::add_const_broadcast0(t, x, &c)?;
        squared_sum(t, y)
    })?;
    check(&mut e, "mean_rows", &[5, 3], &|t, x, _| {
        let y = ops::mean_rows(t, x)?;
        squared_sum(t, y)
    })?;
    check(&mut e, "stack_rows", &[3, 4], &|t, x, _| {
        let r0 = ops::mean_rows(t, x)?;
        let r1 = ops::relu(t, r0);
        let y = ops::stack_rows(t, &[r0, r1])?;
        squared_sum(t, y)
    })?;

    // layers
    check_multi(
        &mut e,
        "conv1x1",
        &[&[2, 3, 4, 4], &[5, 3], &[5]],
        &|t, vs, _| {
            let y = nn::conv1x1(t, vs[0], vs[1], vs[2])?;
            squared_sum(t, y)
        },
    )?;
    check_multi(
        &mut e,
        "conv3x3",
        &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]],
        &|t, vs, _| {
            let y = nn::conv3x3(t, vs[0], vs[1], vs[2], 2)?;
            squared_sum(t, y)
        },
    )?;
    check_multi(
        &mut e,
        "batch_norm2d",
        &[&[3, 2, 3, 3], &[2], &[2]],
        &|t, vs, _| {
            let mut bn = BatchNorm2dLayer::new("bn", 2);
            let y = nn::batch_norm2d(t, vs[0], vs[1], vs[2], &mut bn.stats, Mode::Train)?;
            squared_sum(t, y)
        },
    )?;
    check_multi(
        &mut e,
        "linear",
        &[&[4, 3], &[2, 3], &[2]],
        &|t, vs, _| {
            let y = nn::linear(t, vs[0], vs[1], vs[2])?;
            squared_sum(t, y)
        },
    )?;
    check(&mut e, "global_avg_pool", &[2, 3, 4, 4], &|t, x, _| {
        let y = nn::global_avg_pool(t, x)?;
        squared_sum(t, y)
    })?;
    check_multi(
        &mut e,
        "mul_spatial_mask",
        &[&[2, 3, 3, 3], &[2, 1, 3, 3]],
        &|t, vs, _| {
            let y = nn::mul_spatial_mask(t, vs[0], vs[1])?;
            squared_sum(t, y)
        },
    )?;
    check_multi(
        &mut e,
        "mul_channel_vec",
        &[&[2, 3, 3, 3], &[3]],
        &|t, vs, _| {
            let y = nn::mul_channel_vec(t, vs[0], vs[1])?;
            squared_sum(t, y)
        },
    )?;

    // matching core
    check_multi(&mut e, "ncc", &[&[8], &[8]], &|t, vs, _| {
        let y = cosam::ncc(t, vs[0], vs[1], 1e-4)?;
        squared_sum(t, y)
    })?;
    check(&mut e, "build_cost_volume", &[3, 4, 3, 2], &|t, x, _| {
        let cv = cosam::build_cost_volume(t, x, 2, 1e-4)?;
        squared_sum(t, cv.values)
    })?;

    // composite blocks
    let toy_cosam = CosamConfig {
        d_r: 4,
        k: 2,
        mlp_hidden: Some(4),
        ..CosamConfig::default()
    };
    check(&mut e, "spatial_attention", &[3, 6, 3, 3], &|t, x, s| {
        let mut rng = rng_from_seed(s);
        let mut sa = cosam::SpatialAttention::new("sa", 6, 4, 2, 3, 3, 1e-4, &mut rng);
        sa.summary = Conv1x1Layer::new("sa.summary", 2 * 9, 1, &mut rng);
        let (gated, _) = sa.forward(t, x, Mode::Train)?;
        squared_sum(t, gated)
    })?;
    check(&mut e, "channel_attention", &[3, 6, 3, 3], &|t, x, s| {
        let mut rng = rng_from_seed(s);
        let ca = cosam::ChannelAttention::new("ca", 6, 4, &mut rng);
        let (gated, _) = ca.forward(t, x)?;
        squared_sum(t, gated)
    })?;
    {
        let cfg = toy_cosam.clone();
        check(&mut e, "cosam_forward", &[3, 6, 3, 3], &move |t, x, s| {
            let mut rng = rng_from_seed(s);
            let mut m = Cosam::new("m", 6, 3, 3, &cfg, &mut rng)?;
            m.spatial.summary = Conv1x1Layer::new("m.spatial.summary", 2 * 9, 1, &mut rng);
            let out = m.forward(t, x, Mode::Train)?;
            squared_sum(t, out.features)
        })?;
    }
    check(&mut e, "srim_forward", &[3, 8, 3, 3], &|t, x, s| {
        let cfg = SrimConfig {
            c_r: 4,
            n_o: 2,
            heads: 2,
            window: 1,
        };
        let mut rng = rng_from_seed(s);
        let mut m = Srim::new("m", 8, &cfg, &mut rng)?;
        m.expand = Conv1x1Layer::new("m.expand", 4, 8, &mut rng);
        let out = m.forward(t, x)?;
        squared_sum(t, out.features)
    })?;
    check(&mut e, "reid_forward", &[3, 2, 8, 8], &|t, x, s| {
        let cfg = ModelConfig {
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
            temporal: TemporalAgg::Attention,
        };
        let mut rng = rng_from_seed(s);
        let mut model = Model::new("m", &cfg, &mut rng)?;
        let out = model.forward(t, x, Mode::Train)?;
        let logits_sq = squared_sum(t, out.logits)?;
        let emb_sq = squared_sum(t, out.embedding)?;
        ops::add(t, logits_sq, emb_sq)
    })?;

    // objectives
    check(&mut e, "cross_entropy", &[4, 3], &|t, x, _| {
        losses::cross_entropy(t, x, &[0, 2, 1, 0])
    })?;
    check(&mut e, "batch_hard_triplet", &[6, 3], &|t, x, _| {
        losses::batch_hard_triplet(t, x, &[0, 0, 1, 1, 2, 2], 0.3)
    })?;
    check_multi(&mut e, "kl_divergence", &[&[3, 4], &[3, 4]], &|t, vs, _| {
        losses::kl_divergence(t, vs[0], vs[1])
    })?;
    check_multi(&mut e, "reid_loss", &[&[4, 3], &[4, 5]], &|t, vs, _| {
        losses::reid_loss(t, vs[0], vs[1], &[0, 0, 1, 1], 0.3, 1.0)
    })?;
    check_multi(&mut e, "distill_loss", &[&[3, 4], &[3, 4]], &|t, vs, _| {
        losses::distill_loss(t, vs[0], vs[1], &[0, 1, 2], 1.0, 1.0)
    })?;

    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_audit_passes() {
        let entries = run_audit().unwrap();
        assert!(entries.len() >= 30);
        for entry in &entries {
            assert!(
                entry.passed(),
                "{} failed with max rel err {}",
                entry.name,
                entry.max_rel_err
            );
        }
    }
}
