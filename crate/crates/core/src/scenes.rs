//! Synthetic scenes, the line-delimited dataset format and AP@40.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqdError};
use crate::geometry::{iou3d, GroundTruthObject, Intrinsics, OrientedBox3D};
use crate::numerics::Tensor;

/// Feature channels per grid cell: class amplitudes (3), inverse depth,
/// size (3), yaw sin/cos, offset to the object centre (2).
pub const GRID_CHANNELS: usize = 11;
const CLASS_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub grid_size: usize,
    pub max_objects: usize,
    /// Mean `(length, width, height)` per class, metres.
    pub size_priors: Vec<[f64; 3]>,
    /// Relative spread of sizes around the prior.
    pub size_jitter: f64,
    pub depth_range: (f64, f64),
    /// Ground plane distance below the camera, metres.
    pub camera_height: f64,
    pub feature_noise: f64,
    pub intrinsics: Intrinsics,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_size: 16,
            max_objects: 4,
            size_priors: vec![[1.0, 0.8, 1.7], [4.0, 1.7, 1.5], [8.0, 2.5, 3.2]],
            size_jitter: 0.1,
            depth_range: (8.0, 30.0),
            camera_height: 1.6,
            feature_noise: 0.05,
            intrinsics: Intrinsics::default(),
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.size_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(VqdError::Config(m.to_string()));
        if self.grid_size == 0 {
            return fail("scene grid_size must be at least 1");
        }
        if self.size_priors.is_empty() || self.size_priors.len() > CLASS_CHANNELS {
            return fail("between 1 and 3 size priors are supported");
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 1.0 && hi > lo && hi < crate::geometry::MAX_DEPTH) {
            return fail("depth range must satisfy 1 < min < max < 120");
        }
        if !(0.0..0.5).contains(&self.size_jitter) || self.feature_noise < 0.0 {
            return fail("size_jitter must lie in [0, 0.5) and feature_noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub objects: Vec<GroundTruthObject>,
    /// `F x F x GRID_CHANNELS`.
    pub grid: Tensor,
}

impl Scene {
    pub fn ground_truth_boxes(&self) -> Vec<(usize, OrientedBox3D)> {
        self.objects.iter().map(|o| (o.category, o.to_box3d(&self.intrinsics))).collect()
    }
}

/// Places one object of `category` on the ground plane, derives its image
/// box from the projected 3D corners clipped to the image.
fn sample_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, category: usize) -> GroundTruthObject {
    let intr = &cfg.intrinsics;
    let prior = cfg.size_priors[category];
    let dims = prior.map(|d| d * (1.0 + (2.0 * rng.random::<f64>() - 1.0) * cfg.size_jitter));
    let depth = rng.random_range(cfg.depth_range.0..cfg.depth_range.1);
    let xn: f64 = rng.random_range(0.1..0.9);
    let theta = rng.random_range(-PI..PI);
    let x = (xn * intr.width - intr.cx) * depth / intr.focal;
    let y = cfg.camera_height - dims[2] / 2.0;
    let center = [x, y, depth];
    let (xc, yc) = intr.project_normalized(center).expect("object in front of camera");
    let bx = OrientedBox3D { center, dims, yaw: theta };
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in bx.corners() {
        let (u, v) = intr.project_normalized(c).expect("corners in front of camera");
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    // truncated objects keep only the visible part of their 2D box
    let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0));
    GroundTruthObject {
        category,
        xc,
        yc,
        l: (xc - x0).max(0.0),
        r: (x1 - xc).max(0.0),
        t: (yc - y0).max(0.0),
        b: (y1 - yc).max(0.0),
        l3d: dims[0],
        w3d: dims[1],
        h3d: dims[2],
        theta,
        depth,
    }
}

/// Anisotropic Gaussian splats of every object plus white noise. Attribute
/// channels follow whichever object dominates a cell.
fn render_grid(rng: &mut ChaCha8Rng, cfg: &SceneConfig, objects: &[GroundTruthObject]) -> Tensor {
    let f = cfg.grid_size;
    let mut data = vec![0.0; f * f * GRID_CHANNELS];
    let cell = 1.0 / f as f64;
    for i in 0..f {
        for j in 0..f {
            let (x, y) = ((j as f64 + 0.5) * cell, (i as f64 + 0.5) * cell);
            let px = &mut data[(i * f + j) * GRID_CHANNELS..(i * f + j + 1) * GRID_CHANNELS];
            let mut dominant: Option<(f64, &GroundTruthObject)> = None;
            for o in objects {
                let sx = (0.5 * (o.l + o.r)).max(0.5 * cell);
                let sy = (0.5 * (o.t + o.b)).max(0.5 * cell);
                let w = (-0.5 * (((x - o.xc) / sx).powi(2) + ((y - o.yc) / sy).powi(2))).exp();
                px[o.category] += w;
                if dominant.is_none_or(|(dw, _)| w > dw) {
                    dominant = Some((w, o));
                }
            }
            if let Some((w, o)) = dominant {
                let attrs = [
                    10.0 / o.depth,
                    o.l3d / 5.0,
                    o.w3d / 5.0,
                    o.h3d / 5.0,
                    o.theta.sin(),
                    o.theta.cos(),
                    (o.xc - x) * 4.0,
                    (o.yc - y) * 4.0,
                ];
                // attributes read out at full strength inside the splat core
                let gate = (4.0 * w).min(1.0);
                for (slot, a) in px[CLASS_CHANNELS..].iter_mut().zip(attrs) {
                    *slot = gate * a;
                }
            }
        }
    }
    if cfg.feature_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.feature_noise).expect("valid noise std");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    Tensor::new(vec![f, f, GRID_CHANNELS], data).expect("grid shape")
}

/// Samples a scene; `num_objects = None` draws `K` uniformly from
/// `1..=max_objects`.
pub fn generate_scene_with(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    scene_id: u64,
    seed: u64,
    num_objects: Option<usize>,
) -> Scene {
    let k = num_objects.unwrap_or_else(|| rng.random_range(1..=cfg.max_objects.max(1)));
    let objects: Vec<GroundTruthObject> = (0..k)
        .map(|_| {
            let category = rng.random_range(0..cfg.num_classes());
            sample_object(rng, cfg, category)
        })
        .collect();
    let grid = render_grid(rng, cfg, &objects);
    Scene { scene_id, seed, intrinsics: cfg.intrinsics, objects, grid }
}

/// Scene fully determined by `seed`, which doubles as its id.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene_with(&mut rng, cfg, seed, seed, None)
}

/// Scenes with seeds `first_seed .. first_seed + count`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, first_seed: u64) -> Vec<Scene> {
    (0..count as u64).map(|i| generate_scene(first_seed.wrapping_add(i), cfg)).collect()
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    seed: u64,
    intrinsics: Intrinsics,
    objects: Vec<[f64; 12]>,
    grid_shape: Vec<usize>,
    grid: String,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        let bytes: Vec<u8> = s.grid.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            scene_id: s.scene_id,
            seed: s.seed,
            intrinsics: s.intrinsics,
            objects: s.objects.iter().map(GroundTruthObject::to_array).collect(),
            grid_shape: s.grid.shape().to_vec(),
            grid: B64.encode(bytes),
        }
    }
}

impl SceneRecord {
    fn into_scene(self) -> std::result::Result<Scene, String> {
        let bytes = B64.decode(self.grid.as_bytes()).map_err(|e| format!("grid payload: {e}"))?;
        if bytes.len() % 8 != 0 {
            return Err("grid payload is not a whole number of f64 values".into());
        }
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let grid = Tensor::new(self.grid_shape, data).map_err(|e| e.to_string())?;
        let objects = self
            .objects
            .iter()
            .map(GroundTruthObject::from_array)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        Ok(Scene { scene_id: self.scene_id, seed: self.seed, intrinsics: self.intrinsics, objects, grid })
    }
}

pub fn write_dataset<W: Write>(scenes: &[Scene], mut w: W) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut w, &SceneRecord::from(s)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// One JSON object per line; blank lines are skipped.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| VqdError::Parse { line: i + 1, msg };
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        scenes.push(rec.into_scene().map_err(parse)?);
    }
    Ok(scenes)
}

pub fn save_dataset(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(scenes, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    read_dataset(BufReader::new(std::fs::File::open(path)?))
}

/// A scored 3D detection attributed to one scene of an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredDetection {
    pub scene: usize,
    pub category: usize,
    pub score: f64,
    pub box3d: OrientedBox3D,
}

pub const RECALL_POINTS: usize = 40;

fn ranking(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    // ties resolved by content so the ranking never depends on input order
    b.score
        .total_cmp(&a.score)
        .then(a.scene.cmp(&b.scene))
        .then(a.category.cmp(&b.category))
        .then_with(|| {
            let key = |d: &ScoredDetection| {
                [d.box3d.center[0], d.box3d.center[1], d.box3d.center[2], d.box3d.dims[0], d.box3d.dims[1], d.box3d.dims[2], d.box3d.yaw]
            };
            key(a).iter().zip(key(b)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
}

/// Average precision with precision interpolated at recall
/// `1/40, 2/40, ..., 1`.
///
/// `ground_truths[s]` lists `(category, box)` for scene `s`. Detections are
/// processed best score first; each claims the unclaimed same-class ground
/// truth of its scene with the highest IoU3D, counting as a true positive
/// when that IoU reaches `iou_threshold`.
pub fn ap40(
    detections: &[ScoredDetection],
    ground_truths: &[Vec<(usize, OrientedBox3D)>],
    iou_threshold: f64,
) -> Result<f64> {
    let total: usize = ground_truths.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(VqdError::NoGroundTruth);
    }
    let mut order: Vec<&ScoredDetection> = detections.iter().collect();
    order.sort_by(|a, b| ranking(a, b));
    let mut claimed: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, d) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        if let Some(gts) = ground_truths.get(d.scene) {
            for (i, (cat, gt)) in gts.iter().enumerate() {
                if *cat != d.category || claimed[d.scene][i] {
                    continue;
                }
                let iou = iou3d(&d.box3d, gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
        }
        if let Some((i, iou)) = best {
            if iou >= iou_threshold {
                claimed[d.scene][i] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 1..=RECALL_POINTS {
        let r = k as f64 / RECALL_POINTS as f64;
        let p = curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max);
        sum += p;
    }
    Ok(sum / RECALL_POINTS as f64)
}

/// AP40 restricted to one class; `None` when the class has no ground truth.
pub fn ap40_for_class(
    detections: &[ScoredDetection],
    ground_truths: &[Vec<(usize, OrientedBox3D)>],
    category: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let dets: Vec<ScoredDetection> = detections.iter().filter(|d| d.category == category).copied().collect();
    let gts: Vec<Vec<(usize, OrientedBox3D)>> =
        ground_truths.iter().map(|g| g.iter().filter(|(c, _)| *c == category).copied().collect()).collect();
    ap40(&dets, &gts, iou_threshold).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(x: f64) -> OrientedBox3D {
        OrientedBox3D { center: [x, 0.0, 20.0], dims: [2.0, 2.0, 2.0], yaw: 0.0 }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(42, &cfg), generate_scene(42, &cfg));
        assert_ne!(generate_scene(42, &cfg).grid, generate_scene(43, &cfg).grid);
    }

    #[test]
    fn forced_empty_scene() {
        let cfg = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_scene_with(&mut rng, &cfg, 1, 1, Some(0));
        assert!(s.objects.is_empty());
        assert!(s.grid.is_finite());
        assert!(s.grid.max_abs() < 0.5);
    }

    #[test]
    fn objects_are_valid() {
        let cfg = SceneConfig::default();
        for s in generate_dataset(&cfg, 50, 100) {
            assert!(!s.objects.is_empty() && s.objects.len() <= cfg.max_objects);
            for o in &s.objects {
                assert!(o.is_valid(), "{o:?}");
            }
            assert_eq!(s.grid.shape(), &[16, 16, GRID_CHANNELS]);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let scenes = generate_dataset(&SceneConfig::default(), 3, 7);
        let mut buf = Vec::new();
        write_dataset(&scenes, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..]).unwrap(), scenes);
        let mut empty = Vec::new();
        write_dataset(&[], &mut empty).unwrap();
        assert!(empty.is_empty());
        assert!(read_dataset(&empty[..]).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let scenes = generate_dataset(&SceneConfig::default(), 1, 7);
        let mut buf = Vec::new();
        write_dataset(&scenes, &mut buf).unwrap();
        buf.extend_from_slice(b"{not json}\n");
        match read_dataset(&buf[..]) {
            Err(VqdError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![vec![(0, unit_box(0.0)), (1, unit_box(5.0))]];
        let dets: Vec<ScoredDetection> =
            gts[0].iter().map(|&(category, box3d)| ScoredDetection { scene: 0, category, score: 1.0, box3d }).collect();
        assert_eq!(ap40(&dets, &gts, 0.5).unwrap(), 1.0);
        assert_eq!(ap40(&[], &gts, 0.5).unwrap(), 0.0);
        assert!(matches!(ap40(&dets, &[vec![]], 0.5), Err(VqdError::NoGroundTruth)));
    }

    #[test]
    fn hand_executed_four_by_four() {
        // four ground truths; the two best-scored detections hit, the other two miss
        let gts = vec![vec![(0, unit_box(0.0)), (0, unit_box(5.0)), (0, unit_box(10.0)), (0, unit_box(15.0))]];
        let det = |x: f64, score: f64| ScoredDetection { scene: 0, category: 0, score, box3d: unit_box(x) };
        let dets = [det(100.0, 0.3), det(0.0, 0.9), det(200.0, 0.2), det(5.0, 0.8)];
        // precision 1 at recall 1/4 and 2/4; recall never exceeds 1/2.
        // 20 of 40 recall points reach precision 1, the rest 0.
        assert_eq!(ap40(&dets, &gts, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn class_mismatch_is_not_a_hit() {
        let gts = vec![vec![(0, unit_box(0.0))]];
        let dets = [ScoredDetection { scene: 0, category: 1, score: 0.9, box3d: unit_box(0.0) }];
        assert_eq!(ap40(&dets, &gts, 0.5).unwrap(), 0.0);
        assert_eq!(ap40_for_class(&dets, &gts, 0, 0.5), Some(0.0));
        assert_eq!(ap40_for_class(&dets, &gts, 1, 0.5), None);
    }
}
