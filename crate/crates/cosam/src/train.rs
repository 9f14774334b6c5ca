//! Deterministic training and evaluation driver. All randomness comes from
//! named substreams of the run seed, every loop iterates in a fixed order,
//! and nothing is threaded, so a config + seed pair fully determines the
//! trained weights and the metric report.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CosamError, Result};
use crate::io;
use crate::losses;
use crate::metrics;
use crate::model::Model;
use crate::nn::Mode;
use crate::ops;
use crate::optim::{step_lr, Adam};
use crate::rng::substream;
use crate::synthdata::{frames_subset, sample_batch, select_frames, Dataset, Snippet};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub losses: Vec<LossRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub mean_ap: f64,
    /// Mean spatial-attention mass on the object, over evaluation snippets.
    pub attention_coverage: Option<f64>,
    /// Mean object area fraction at the attention resolution; the coverage
    /// of a uniform (uninformed) mask.
    pub gt_area_fraction: Option<f64>,
}

/// Stable digest of the full configuration, for run provenance.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    format!("{:x}", h.finalize())
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let mut rng = substream(cfg.seed, "model-init");
    Model::new("model", &cfg.model_config()?, &mut rng)
}

/// Train a fresh model on the dataset's training split.
pub fn train(cfg: &RunConfig, dataset: &Dataset, log_every: usize) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut model = build_model(cfg)?;
    let mut batch_rng = substream(cfg.seed, "batches");
    let mut adam = Adam::new(cfg.train.lr);
    let decay_every = cfg.lr_decay_every();
    let selection = cfg.frame_selection()?;
    let track_len = cfg.data.track_len;
    let mut losses_log = Vec::new();

    for step in 0..cfg.train.steps {
        adam.lr = step_lr(cfg.train.lr, step, decay_every);
        let batch = sample_batch(
            &dataset.train,
            cfg.train.batch_p,
            cfg.train.batch_k,
            &mut batch_rng,
        )?;
        let mut tape = Tape::new();
        let mut embeddings = Vec::new();
        let mut logit_rows = Vec::new();
        let mut labels = Vec::new();
        for (idx, label) in batch {
            let indices = select_frames(track_len, cfg.train.n_frames, selection, &mut batch_rng)?;
            let (frames, _) = frames_subset(&dataset.train[idx], &indices)?;
            let x = tape.constant(frames);
            let out = model.forward(&mut tape, x, Mode::Train)?;
            embeddings.push(out.embedding);
            logit_rows.push(out.logits);
            labels.push(label);
        }
        let emb = ops::stack_rows(&mut tape, &embeddings)?;
        let logits = ops::stack_rows(&mut tape, &logit_rows)?;
        let ce = losses::cross_entropy(&mut tape, logits, &labels)?;
        let tri = losses::batch_hard_triplet(&mut tape, emb, &labels, cfg.train.margin)?;
        let tri_scaled = ops::scale(&mut tape, tri, cfg.train.lambda_tri);
        let total = ops::add(&mut tape, ce, tri_scaled)?;
        let total_v = tape.value(total).item()?;
        if !total_v.is_finite() {
            return Err(CosamError::NonFinite(format!(
                "loss became non-finite at step {step}"
            )));
        }
        tape.backward(total)?;
        adam.step(&mut model, &tape)?;
        if log_every > 0 && (step % log_every == 0 || step + 1 == cfg.train.steps) {
            losses_log.push(LossRecord {
                step,
                lr: adam.lr,
                total: total_v,
                ce: tape.value(ce).item()?,
                triplet: tape.value(tri).item()?,
            });
        }
    }
    Ok((
        model,
        TrainReport {
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            steps: cfg.train.steps,
            losses: losses_log,
        },
    ))
}

/// Evenly spaced deterministic frame picks used everywhere at eval time.
pub fn eval_frame_indices(track_len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * track_len / n).collect()
}

fn snippet_embedding(model: &mut Model, snippet: &Snippet, n: usize) -> Result<(Vec<f64>, Option<(Tensor, Tensor)>)> {
    let track_len = snippet.frames.shape()[0];
    let indices = eval_frame_indices(track_len, n);
    let (frames, gts) = frames_subset(snippet, &indices)?;
    let mut tape = Tape::new();
    let x = tape.constant(frames);
    let out = model.forward(&mut tape, x, Mode::Eval)?;
    let emb = tape.value(out.embedding).data().to_vec();
    // attention masks from the earliest co-segmentation site
    let mask = out
        .masks
        .iter()
        .min_by_key(|(site, _)| *site)
        .map(|(_, m)| (tape.value(*m).clone(), gts));
    Ok((emb, mask))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Retrieval metrics on the query/gallery splits, plus attention coverage
/// when the model exposes spatial masks.
pub fn evaluate(model: &mut Model, dataset: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    if dataset.query.is_empty() || dataset.gallery.is_empty() {
        return Err(CosamError::arg("evaluation needs query and gallery snippets"));
    }
    let n = cfg.train.n_frames;
    let mut q_emb = Vec::new();
    let mut coverages = Vec::new();
    let mut fractions = Vec::new();
    for s in &dataset.query {
        let (emb, mask) = snippet_embedding(model, s, n)?;
        q_emb.push(emb);
        if let Some((masks, gts)) = mask {
            let (frames, h, w) = (masks.shape()[0], masks.shape()[2], masks.shape()[3]);
            let (gh, gw) = (gts.shape()[1], gts.shape()[2]);
            for fi in 0..frames {
                let m = Tensor::from_vec(
                    vec![h, w],
                    masks.data()[fi * h * w..(fi + 1) * h * w].to_vec(),
                )?;
                let g = Tensor::from_vec(
                    vec![gh, gw],
                    gts.data()[fi * gh * gw..(fi + 1) * gh * gw].to_vec(),
                )?;
                // a uniform mask scores exactly the binarized area fraction;
                // frames whose object vanishes at this resolution are skipped
                let uniform = Tensor::full(&[h, w], 1.0);
                if let Ok(frac) = metrics::attention_coverage(&uniform, &g) {
                    fractions.push(frac);
                    coverages.push(metrics::attention_coverage(&m, &g)?);
                }
            }
        }
    }
    let mut g_emb = Vec::new();
    for s in &dataset.gallery {
        g_emb.push(snippet_embedding(model, s, n)?.0);
    }
    let (q, g) = (q_emb.len(), g_emb.len());
    let mut dist = Tensor::zeros(&[q, g]);
    for qi in 0..q {
        for gi in 0..g {
            dist.data_mut()[qi * g + gi] = euclidean(&q_emb[qi], &g_emb[gi]);
        }
    }
    let q_labels: Vec<usize> = dataset.query.iter().map(|s| s.identity).collect();
    let g_labels: Vec<usize> = dataset.gallery.iter().map(|s| s.identity).collect();
    let max_rank = g.min(20);
    let cmc = metrics::cmc(&dist, &q_labels, &g_labels, max_rank)?;
    let mean_ap = metrics::mean_ap(&dist, &q_labels, &g_labels)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        rank1: cmc[0],
        cmc,
        mean_ap,
        attention_coverage: (!coverages.is_empty()).then(|| mean(&coverages)),
        gt_area_fraction: (!fractions.is_empty()).then(|| mean(&fractions)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub train: TrainReport,
    pub eval: EvalReport,
}

pub fn run_record(train: TrainReport, eval: EvalReport) -> RunRecord {
    RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: train.config_hash.clone(),
        seed: train.seed,
        train,
        eval,
    }
}

/// Full pipeline: generate data, train, evaluate, optionally persist.
pub fn run(cfg: &RunConfig, out_dir: Option<&std::path::Path>, log_every: usize) -> Result<(Model, RunRecord)> {
    let dataset = crate::synthdata::make_dataset(&cfg.dataset_config())?;
    let (mut model, train_report) = train(cfg, &dataset, log_every)?;
    let eval_report = evaluate(&mut model, &dataset, cfg)?;
    let record = run_record(train_report, eval_report);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        io::save_checkpoint(&dir.join("checkpoint.bin"), &model)?;
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| CosamError::Format(format!("run record encode: {e}")))?;
        std::fs::write(dir.join("run.json"), json)?;
    }
    Ok((model, record))
}
