//! Optimiser, training-mode ladder and the epoch loop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{self, attention_negative_entropy, noisy_to_learnable_mass, EpochRecord};
use crate::error::{Result, VqdError};
use crate::model::{Detector, DetectorConfig};
use crate::numerics::{Graph, ParameterStore, Tensor};
use crate::scenes::{ap40, Scene, ScoredDetection};
use crate::vqd::DenoisingMode;

/// Which training-only mechanisms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// Group-wise detection loss only.
    Baseline,
    /// Adds forward-looking distillation.
    Fld,
    /// Distillation plus conventional (deterministic) query denoising.
    FldDn,
    /// Distillation plus variational query denoising.
    FldVdn,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 4] = [Self::Baseline, Self::Fld, Self::FldDn, Self::FldVdn];

    /// Rewrites the training-only parts of `cfg`; inference-relevant
    /// settings are untouched.
    pub fn apply(self, cfg: &mut DetectorConfig) {
        match self {
            Self::Baseline => {
                cfg.noisy_groups = 0;
                cfg.loss_weights.dn = 0.0;
                cfg.loss_weights.distill = 0.0;
            }
            Self::Fld => {
                cfg.noisy_groups = 0;
                cfg.loss_weights.dn = 0.0;
            }
            Self::FldDn => cfg.denoising.mode = DenoisingMode::Deterministic,
            Self::FldVdn => cfg.denoising.mode = DenoisingMode::Variational,
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Fld => "fld",
            Self::FldDn => "fld+dn",
            Self::FldVdn => "fld+vdn",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = VqdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| VqdError::Config(format!("unknown mode `{s}` (baseline, fld, fld+dn, fld+vdn)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Fractions of the epoch budget after which the step size is decayed.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            decay_at: vec![0.6, 0.85],
            decay_factor: 0.5,
            epochs: 60,
            batch_size: 8,
            grad_clip: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.decay_factor > 0.0
            && self.decay_at.iter().all(|f| (0.0..=1.0).contains(f))
            && self.grad_clip >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(VqdError::Config(format!("optimizer settings out of range: {self:?}")))
        }
    }

    /// Step size during `epoch` (0-based): decayed once for every boundary
    /// `round(frac * epochs)` already reached.
    pub fn step_size_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_at.iter().filter(|&&f| epoch >= (f * self.epochs as f64).round() as usize).count();
        self.step_size * self.decay_factor.powi(passed as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParameterStore, step_size: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let value = store.value_mut(id).data_mut();
            for j in 0..grad.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
                value[j] -= step_size * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids.iter().map(|&id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// IoU3D threshold for validation AP.
    pub eval_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { detector: DetectorConfig::default(), optimizer: OptimizerConfig::default(), seed: 0, eval_iou: 0.5 }
    }
}

/// Files written for a named run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }
}

pub struct TrainOutcome {
    pub detector: Detector,
    /// Weights of the epoch with the best validation AP.
    pub best: ParameterStore,
    /// Weights after the last epoch.
    pub last: ParameterStore,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_ap: f64,
}

/// Thresholded detections of every scene, ready for [`ap40`].
pub fn detect_all(detector: &Detector, store: &ParameterStore, scenes: &[Scene]) -> Result<Vec<ScoredDetection>> {
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        for d in detector.inference(store, s)? {
            out.push(ScoredDetection { scene: i, category: d.category, score: d.score, box3d: d.box3d });
        }
    }
    Ok(out)
}

/// AP40 over `scenes`; 0 when the set has no ground truth.
pub fn evaluate(detector: &Detector, store: &ParameterStore, scenes: &[Scene], iou: f64) -> Result<f64> {
    let dets = detect_all(detector, store, scenes)?;
    let gts: Vec<_> = scenes.iter().map(Scene::ground_truth_boxes).collect();
    match ap40(&dets, &gts, iou) {
        Err(VqdError::NoGroundTruth) => Ok(0.0),
        other => other,
    }
}

#[derive(Default)]
struct EpochTotals {
    scenes: usize,
    maps: usize,
    det: f64,
    dn: f64,
    res: f64,
    kl: f64,
    distill: f64,
    entropy: f64,
    mass: f64,
}

/// Trains from the seeded initialisation. `on_epoch` sees every record as
/// soon as it is complete; with a run directory the metrics, config text,
/// timing and best checkpoint are written there.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    run: Option<(&RunDir, &str)>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.optimizer.validate()?;
    let (detector, mut store) = Detector::new(cfg.detector.clone(), cfg.seed)?;
    if let Some((dir, config_text)) = run {
        std::fs::write(dir.config(), config_text)?;
        if dir.metrics().exists() {
            std::fs::remove_file(dir.metrics())?;
        }
    }
    let opt = &cfg.optimizer;
    let mut adam = Adam::new(&store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(opt.epochs);
    let mut best = (store.clone(), 0usize, f64::NEG_INFINITY);
    let started = Instant::now();

    for epoch in 0..opt.epochs {
        order.shuffle(&mut shuffle_rng);
        let beta = cfg.detector.denoising.beta_at(epoch, opt.epochs);
        let step_size = opt.step_size_at(epoch);
        let mut totals = EpochTotals::default();
        for (step, batch) in order.chunks(opt.batch_size).enumerate() {
            store.zero_grads();
            for &idx in batch {
                let scene = &train_set[idx];
                let mut g = Graph::new();
                let out = detector.training_forward(&mut g, &store, scene, beta, &mut noise_rng, None)?;
                let loss = g.scalar(out.overall);
                if !loss.is_finite() {
                    return Err(VqdError::NonFinite(format!(
                        "loss at epoch {epoch}, step {step}, scene {}",
                        scene.scene_id
                    )));
                }
                totals.scenes += 1;
                totals.det += g.scalar(out.det);
                totals.dn += g.scalar(out.dn);
                totals.res += g.scalar(out.reconstruction);
                totals.kl += out.kl.map_or(0.0, |k| g.scalar(k));
                totals.distill += g.scalar(out.distill);
                for map in &out.attn_maps {
                    totals.entropy += attention_negative_entropy(map, Some(&out.mask))?;
                    totals.mass += noisy_to_learnable_mass(
                        map,
                        out.mask.num_learnable,
                        out.mask.num_objects,
                        out.mask.num_noisy_groups,
                    )?;
                    totals.maps += 1;
                }
                let scaled = g.scale(out.overall, 1.0 / batch.len() as f64);
                g.backward_into(scaled, &mut store)?;
            }
            clip_grad_norm(&mut store, opt.grad_clip);
            adam.step(&mut store, step_size, opt);
        }
        let val_ap40 = evaluate(&detector, &store, val_set, cfg.eval_iou)?;
        let n = totals.scenes.max(1) as f64;
        let maps = totals.maps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            neg_entropy: totals.entropy / maps,
            noisy_learnable_mass: totals.mass / maps,
            loss_det: totals.det / n,
            loss_dn: totals.dn / n,
            loss_res: totals.res / n,
            loss_kl: totals.kl / n,
            loss_distill: totals.distill / n,
            val_ap40,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if val_ap40 > best.2 {
            best = (store.clone(), epoch, val_ap40);
        }
        if let Some((dir, _)) = run {
            diagnostics::append_run_csv(&record, &dir.metrics())?;
        }
        on_epoch(&record);
        records.push(record);
    }
    if let Some((dir, _)) = run {
        best.0.save(&dir.checkpoint())?;
        diagnostics::write_timing_csv(&records, &dir.timing())?;
    }
    Ok(TrainOutcome { detector, best: best.0, last: store, records, best_epoch: best.1, best_ap: best.2 })
}
