//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes every key so a run directory's
//! `config.txt` fully describes the run.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Result, VqdError};
use crate::model::DetectorConfig;
use crate::scenes::SceneConfig;
use crate::train::{OptimizerConfig, TrainConfig};
use crate::vqd::DenoisingMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub runs_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), scene: SceneConfig::default(), runs_dir: PathBuf::from("runs") }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| VqdError::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn mode_name(m: DenoisingMode) -> &'static str {
    match m {
        DenoisingMode::Variational => "variational",
        DenoisingMode::Deterministic => "deterministic",
    }
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.train.detector;
        let o = &self.train.optimizer;
        let s = &self.scene;
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("seed", self.train.seed.to_string()),
            ("groups", d.groups.to_string()),
            ("queries_per_group", d.queries_per_group.to_string()),
            ("noisy_groups", d.noisy_groups.to_string()),
            ("width", d.width.to_string()),
            ("layers", d.layers.to_string()),
            ("heads", d.heads.to_string()),
            ("grid_size", d.grid_size.to_string()),
            ("lambda_det", d.loss_weights.det.to_string()),
            ("lambda_dn", d.loss_weights.dn.to_string()),
            ("lambda_distill", d.loss_weights.distill.to_string()),
            ("match_class", d.matcher.class.to_string()),
            ("match_center", d.matcher.center.to_string()),
            ("match_giou", d.matcher.giou.to_string()),
            ("loss_class", d.components.class.to_string()),
            ("loss_center", d.components.center.to_string()),
            ("loss_box_l1", d.components.box_l1.to_string()),
            ("loss_giou", d.components.giou.to_string()),
            ("loss_dims", d.components.dims.to_string()),
            ("loss_orient", d.components.orient.to_string()),
            ("loss_depth", d.components.depth.to_string()),
            ("noise_center_shift", d.noise.center_shift_scale.to_string()),
            ("noise_box_scale", d.noise.box_scale_range.to_string()),
            ("noise_label_flip", d.noise.label_flip_prob.to_string()),
            ("noise_dim_scale", d.noise.dim_scale_range.to_string()),
            ("noise_angle_jitter", d.noise.angle_jitter_rad.to_string()),
            ("noise_depth_jitter", d.noise.depth_jitter_frac.to_string()),
            ("denoising_mode", mode_name(d.denoising.mode).to_string()),
            ("beta", d.denoising.beta.to_string()),
            ("kl_warmup_frac", d.denoising.warmup_frac.to_string()),
            ("confidence_threshold", d.confidence_threshold.to_string()),
            ("scene_max_objects", s.max_objects.to_string()),
            ("scene_depth_min", s.depth_range.0.to_string()),
            ("scene_depth_max", s.depth_range.1.to_string()),
            ("scene_size_jitter", s.size_jitter.to_string()),
            ("scene_feature_noise", s.feature_noise.to_string()),
            ("step_size", o.step_size.to_string()),
            ("decay_at", list(&o.decay_at)),
            ("decay_factor", o.decay_factor.to_string()),
            ("epochs", o.epochs.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("grad_clip", o.grad_clip.to_string()),
            ("eval_iou", self.train.eval_iou.to_string()),
            ("runs_dir", self.runs_dir.display().to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|e| e.0).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.train.detector;
        let o = &mut self.train.optimizer;
        let s = &mut self.scene;
        match key {
            "seed" => self.train.seed = parse_num(key, v)?,
            "groups" => d.groups = parse_num(key, v)?,
            "queries_per_group" => d.queries_per_group = parse_num(key, v)?,
            "noisy_groups" => d.noisy_groups = parse_num(key, v)?,
            "width" => d.width = parse_num(key, v)?,
            "layers" => d.layers = parse_num(key, v)?,
            "heads" => d.heads = parse_num(key, v)?,
            "grid_size" => d.grid_size = parse_num(key, v)?,
            "lambda_det" => d.loss_weights.det = parse_num(key, v)?,
            "lambda_dn" => d.loss_weights.dn = parse_num(key, v)?,
            "lambda_distill" => d.loss_weights.distill = parse_num(key, v)?,
            "match_class" => d.matcher.class = parse_num(key, v)?,
            "match_center" => d.matcher.center = parse_num(key, v)?,
            "match_giou" => d.matcher.giou = parse_num(key, v)?,
            "loss_class" => d.components.class = parse_num(key, v)?,
            "loss_center" => d.components.center = parse_num(key, v)?,
            "loss_box_l1" => d.components.box_l1 = parse_num(key, v)?,
            "loss_giou" => d.components.giou = parse_num(key, v)?,
            "loss_dims" => d.components.dims = parse_num(key, v)?,
            "loss_orient" => d.components.orient = parse_num(key, v)?,
            "loss_depth" => d.components.depth = parse_num(key, v)?,
            "noise_center_shift" => d.noise.center_shift_scale = parse_num(key, v)?,
            "noise_box_scale" => d.noise.box_scale_range = parse_num(key, v)?,
            "noise_label_flip" => d.noise.label_flip_prob = parse_num(key, v)?,
            "noise_dim_scale" => d.noise.dim_scale_range = parse_num(key, v)?,
            "noise_angle_jitter" => d.noise.angle_jitter_rad = parse_num(key, v)?,
            "noise_depth_jitter" => d.noise.depth_jitter_frac = parse_num(key, v)?,
            "denoising_mode" => {
                d.denoising.mode = match v {
                    "variational" => DenoisingMode::Variational,
                    "deterministic" => DenoisingMode::Deterministic,
                    _ => {
                        return Err(VqdError::Config(format!(
                            "`{key}`: expected variational or deterministic, got `{v}`"
                        )))
                    }
                }
            }
            "beta" => d.denoising.beta = parse_num(key, v)?,
            "kl_warmup_frac" => d.denoising.warmup_frac = parse_num(key, v)?,
            "confidence_threshold" => d.confidence_threshold = parse_num(key, v)?,
            "scene_max_objects" => s.max_objects = parse_num(key, v)?,
            "scene_depth_min" => s.depth_range.0 = parse_num(key, v)?,
            "scene_depth_max" => s.depth_range.1 = parse_num(key, v)?,
            "scene_size_jitter" => s.size_jitter = parse_num(key, v)?,
            "scene_feature_noise" => s.feature_noise = parse_num(key, v)?,
            "step_size" => o.step_size = parse_num(key, v)?,
            "decay_at" => o.decay_at = parse_list(key, v)?,
            "decay_factor" => o.decay_factor = parse_num(key, v)?,
            "epochs" => o.epochs = parse_num(key, v)?,
            "batch_size" => o.batch_size = parse_num(key, v)?,
            "grad_clip" => o.grad_clip = parse_num(key, v)?,
            "eval_iou" => self.train.eval_iou = parse_num(key, v)?,
            "runs_dir" => self.runs_dir = PathBuf::from(v),
            _ => return Err(VqdError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| VqdError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the settings shared between scenes and the detector.
    pub fn sync(&mut self) {
        self.scene.grid_size = self.train.detector.grid_size;
        self.train.detector.num_classes = self.scene.num_classes();
    }

    pub fn validate(&self) -> Result<()> {
        self.train.detector.validate()?;
        self.train.optimizer.validate()?;
        self.scene.validate()?;
        if !(self.train.eval_iou > 0.0 && self.train.eval_iou < 1.0) {
            return Err(VqdError::Config("eval_iou must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn detector(&self) -> &DetectorConfig {
        &self.train.detector
    }

    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.train.optimizer
    }
}
