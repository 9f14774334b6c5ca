//! Run configuration. One TOML file describes data generation, the model and
//! the training schedule; unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cosam::CosamConfig;
use crate::error::{CosamError, Result};
use crate::model::{ModelConfig, TemporalAgg};
use crate::srim::SrimConfig;
use crate::synthdata::{DatasetConfig, FrameSelection, SnippetParams};

fn d_num_identities() -> usize { 16 }
fn d_snippets_per_id() -> usize { 6 }
fn d_track_len() -> usize { 8 }
fn d_height() -> usize { 64 }
fn d_width() -> usize { 32 }
fn d_clutter() -> f64 { 0.45 }
fn d_occlusion_prob() -> f64 { 0.3 }
fn d_max_speed() -> f64 { 1.0 }
fn d_channels() -> Vec<usize> { vec![8, 16, 32, 64] }
fn d_cosam_sites() -> Vec<usize> { vec![3, 4] }
fn d_true() -> bool { true }
fn d_d_r() -> usize { 256 }
fn d_k() -> usize { 3 }
fn d_embed_dim() -> usize { 128 }
fn d_temporal() -> String { "average".into() }
fn d_c_r() -> usize { 512 }
fn d_n_objects() -> usize { 5 }
fn d_heads() -> usize { 8 }
fn d_window() -> usize { 1 }
fn d_steps() -> usize { 2000 }
fn d_n_frames() -> usize { 4 }
fn d_frame_selection() -> String { "sequential".into() }
fn d_batch_p() -> usize { 4 }
fn d_batch_k() -> usize { 2 }
fn d_lr() -> f64 { 1e-4 }
fn d_margin() -> f64 { 0.3 }
fn d_lambda_tri() -> f64 { 1.0 }

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_num_identities")]
    pub num_identities: usize,
    #[serde(default = "d_snippets_per_id")]
    pub snippets_per_id: usize,
    #[serde(default = "d_track_len")]
    pub track_len: usize,
    #[serde(default = "d_height")]
    pub height: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_clutter")]
    pub clutter: f64,
    #[serde(default = "d_occlusion_prob")]
    pub occlusion_prob: f64,
    #[serde(default = "d_max_speed")]
    pub max_speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "d_cosam_sites")]
    pub cosam_sites: Vec<usize>,
    #[serde(default)]
    pub srim_sites: Vec<usize>,
    #[serde(default = "d_true")]
    pub spatial: bool,
    #[serde(default = "d_true")]
    pub channel: bool,
    #[serde(default = "d_d_r")]
    pub d_r: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    /// "average" or "attention".
    #[serde(default = "d_temporal")]
    pub temporal: String,
    #[serde(default = "d_c_r")]
    pub c_r: usize,
    #[serde(default = "d_n_objects")]
    pub n_objects: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_window")]
    pub window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_n_frames")]
    pub n_frames: usize,
    /// "sequential" or "random".
    #[serde(default = "d_frame_selection")]
    pub frame_selection: String,
    #[serde(default = "d_batch_p")]
    pub batch_p: usize,
    #[serde(default = "d_batch_k")]
    pub batch_k: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// 0 means the default schedule: decay every steps/4.
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_lambda_tri")]
    pub lambda_tri: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "data_default")]
    pub data: DataSection,
    #[serde(default = "model_default")]
    pub model: ModelSection,
    #[serde(default = "train_default")]
    pub train: TrainSection,
}

fn data_default() -> DataSection {
    toml::from_str("").expect("defaults")
}
fn model_default() -> ModelSection {
    toml::from_str("").expect("defaults")
}
fn train_default() -> TrainSection {
    toml::from_str("").expect("defaults")
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| CosamError::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn frame_selection(&self) -> Result<FrameSelection> {
        match self.train.frame_selection.as_str() {
            "sequential" => Ok(FrameSelection::Sequential),
            "random" => Ok(FrameSelection::Random),
            other => Err(CosamError::config(format!(
                "frame_selection must be \"sequential\" or \"random\", got \"{other}\""
            ))),
        }
    }

    pub fn temporal(&self) -> Result<TemporalAgg> {
        match self.model.temporal.as_str() {
            "average" => Ok(TemporalAgg::Average),
            "attention" => Ok(TemporalAgg::Attention),
            other => Err(CosamError::config(format!(
                "temporal must be \"average\" or \"attention\", got \"{other}\""
            ))),
        }
    }

    pub fn lr_decay_every(&self) -> usize {
        if self.train.lr_decay_every > 0 {
            self.train.lr_decay_every
        } else {
            (self.train.steps / 4).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frame_selection()?;
        self.temporal()?;
        let t = &self.train;
        if t.n_frames < 2 {
            return Err(CosamError::config("n_frames must be at least 2"));
        }
        if t.n_frames > self.data.track_len {
            return Err(CosamError::config(format!(
                "n_frames ({}) exceeds track_len ({})",
                t.n_frames, self.data.track_len
            )));
        }
        // each frame needs k distinct other frames to match against
        if !self.model.cosam_sites.is_empty() && self.model.k > t.n_frames - 1 {
            return Err(CosamError::config(format!(
                "k ({}) exceeds n_frames - 1 ({})",
                self.model.k,
                t.n_frames - 1
            )));
        }
        if !self.model.cosam_sites.is_empty() && !self.model.spatial && !self.model.channel {
            return Err(CosamError::config(
                "cosam_sites set but both attention branches are disabled",
            ));
        }
        if t.batch_p < 2 || t.batch_k < 2 {
            return Err(CosamError::config(
                "batch_p and batch_k must both be at least 2 for the triplet loss",
            ));
        }
        if t.steps == 0 || t.lr <= 0.0 || t.margin < 0.0 || t.lambda_tri < 0.0 {
            return Err(CosamError::config(
                "steps must be positive, lr positive, margin and lambda_tri nonnegative",
            ));
        }
        self.model_config()?.validate()?;
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            num_identities: self.data.num_identities,
            snippets_per_id: self.data.snippets_per_id,
            params: SnippetParams {
                t: self.data.track_len,
                h: self.data.height,
                w: self.data.width,
                clutter: self.data.clutter,
                occlusion_prob: self.data.occlusion_prob,
                max_speed: self.data.max_speed,
                seed: 0, // overwritten per snippet
            },
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            in_channels: 3,
            channels: self.model.channels.clone(),
            input_hw: (self.data.height, self.data.width),
            cosam_sites: self.model.cosam_sites.clone(),
            cosam: CosamConfig {
                d_r: self.model.d_r,
                k: self.model.k,
                spatial: self.model.spatial,
                channel: self.model.channel,
                ..CosamConfig::default()
            },
            srim_sites: self.model.srim_sites.clone(),
            srim: SrimConfig {
                c_r: self.model.c_r,
                n_o: self.model.n_objects,
                heads: self.model.heads,
                window: self.model.window,
            },
            embed_dim: self.model.embed_dim,
            num_classes: self.data.num_identities,
            temporal: self.temporal()?,
        })
    }
}
