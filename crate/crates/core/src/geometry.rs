//! Box representations, pinhole projection, oriented IoU and ground-truth
//! corruption for denoising queries.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqdError};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// One annotated object: category, projected centre, 2D edge distances,
/// metric size, yaw and depth. Image quantities are normalised to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub category: usize,
    pub xc: f64,
    pub yc: f64,
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
    pub l3d: f64,
    pub w3d: f64,
    pub h3d: f64,
    pub theta: f64,
    pub depth: f64,
}

pub const MIN_DEPTH: f64 = 0.5;
pub const MAX_DEPTH: f64 = 120.0;
pub const MAX_DIM: f64 = 30.0;
const DIM_FLOOR: f64 = 1e-3;

impl GroundTruthObject {
    pub fn to_array(&self) -> [f64; 12] {
        [
            self.category as f64,
            self.xc,
            self.yc,
            self.l,
            self.r,
            self.t,
            self.b,
            self.l3d,
            self.w3d,
            self.h3d,
            self.theta,
            self.depth,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        if a[0] < 0.0 || a[0].fract() != 0.0 {
            return Err(VqdError::Dimension(format!("category {} is not an index", a[0])));
        }
        let obj = Self {
            category: a[0] as usize,
            xc: a[1],
            yc: a[2],
            l: a[3],
            r: a[4],
            t: a[5],
            b: a[6],
            l3d: a[7],
            w3d: a[8],
            h3d: a[9],
            theta: a[10],
            depth: a[11],
        };
        Ok(obj)
    }

    pub fn anchor(&self) -> AnchorBox6D {
        AnchorBox6D { xc: self.xc, yc: self.yc, l: self.l, r: self.r, t: self.t, b: self.b }
    }

    pub fn is_valid(&self) -> bool {
        let a = self.to_array();
        a.iter().all(|v| v.is_finite())
            && self.l >= 0.0
            && self.r >= 0.0
            && self.t >= 0.0
            && self.b >= 0.0
            && self.xc - self.l >= -0.25
            && self.xc + self.r <= 1.25
            && self.yc - self.t >= -0.25
            && self.yc + self.b <= 1.25
            && [self.l3d, self.w3d, self.h3d].iter().all(|&d| d > 0.0 && d < MAX_DIM)
            && self.depth > MIN_DEPTH
            && self.depth < MAX_DEPTH
            && self.theta > -PI
            && self.theta <= PI
    }

    /// Metric box in the camera frame (y down, z forward).
    pub fn to_box3d(&self, intrinsics: &Intrinsics) -> OrientedBox3D {
        let center = intrinsics.unproject(self.xc, self.yc, self.depth);
        OrientedBox3D { center, dims: [self.l3d, self.w3d, self.h3d], yaw: self.theta }
    }
}

/// 2D reference box: centre plus distances to the four edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox6D {
    pub xc: f64,
    pub yc: f64,
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
}

impl AnchorBox6D {
    pub fn to_array(&self) -> [f64; 6] {
        [self.xc, self.yc, self.l, self.r, self.t, self.b]
    }
}

/// Axis-aligned 2D box as `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl CornerBox {
    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }
}

pub fn box2d_corners(a: &AnchorBox6D) -> CornerBox {
    CornerBox { x_min: a.xc - a.l, y_min: a.yc - a.t, x_max: a.xc + a.r, y_max: a.yc + a.b }
}

/// Inverse of [`box2d_corners`] for a known centre.
pub fn corners_to_anchor(c: &CornerBox, xc: f64, yc: f64) -> AnchorBox6D {
    AnchorBox6D { xc, yc, l: xc - c.x_min, r: c.x_max - xc, t: yc - c.y_min, b: c.y_max - yc }
}

/// Generalised IoU of two corner boxes, in `(-1, 1]`.
pub fn giou2d(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (a.x_max.max(b.x_max) - a.x_min.min(b.x_min)) * (a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Pinhole camera with square pixels. `width`/`height` normalise pixel
/// coordinates into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { focal: 120.0, cx: 64.0, cy: 64.0, width: 128.0, height: 128.0 }
    }
}

impl Intrinsics {
    /// Normalised image coordinates back to a camera-frame point at `depth`.
    pub fn unproject(&self, xn: f64, yn: f64, depth: f64) -> [f64; 3] {
        let u = xn * self.width;
        let v = yn * self.height;
        [(u - self.cx) * depth / self.focal, (v - self.cy) * depth / self.focal, depth]
    }

    pub fn project_normalized(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        let (u, v) = project_to_image(p, self.focal, (self.cx, self.cy))?;
        Ok((u / self.width, v / self.height))
    }
}

/// `u = f x / z + cx`, `v = f y / z + cy`.
pub fn project_to_image(p: [f64; 3], focal: f64, principal: (f64, f64)) -> Result<(f64, f64)> {
    let [x, y, z] = p;
    if z <= 0.0 {
        return Err(VqdError::BehindCamera(z));
    }
    Ok((focal * x / z + principal.0, focal * y / z + principal.1))
}

/// Yaw-oriented box: `dims = [length, width, height]`, length along the
/// heading in the ground (x-z) plane, height along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    /// Footprint corners in the x-z plane, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        let [x, _, z] = self.center;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dl, dw)| (x + c * dl + s * dw, z - s * dl + c * dw))
    }

    /// Point membership, used by sampling oracles.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dz = p[2] - self.center[2];
        let along = c * dx - s * dz;
        let across = s * dx + c * dz;
        along.abs() <= self.dims[0] / 2.0
            && across.abs() <= self.dims[1] / 2.0
            && (p[1] - self.center[1]).abs() <= self.dims[2] / 2.0
    }

    /// All eight corners, used for projection.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let hh = self.dims[2] / 2.0;
        let mut out = [[0.0; 3]; 8];
        for (i, (x, z)) in bev.iter().enumerate() {
            out[i] = [*x, self.center[1] - hh, *z];
            out[i + 4] = [*x, self.center[1] + hh, *z];
        }
        out
    }
}

pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Sutherland-Hodgman clipping of `subject` against the convex `clip`
/// polygon. Both must be counter-clockwise.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

fn ccw(mut poly: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if polygon_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Overlap polygon of two boxes' footprints.
pub fn bev_intersection(a: &OrientedBox3D, b: &OrientedBox3D) -> Vec<(f64, f64)> {
    let pa = ccw(a.bev_corners().to_vec());
    let pb = ccw(b.bev_corners().to_vec());
    clip_convex(&pa, &pb)
}

/// Exact volumetric IoU of two yaw-oriented boxes.
pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if !(va > 0.0 && vb > 0.0) {
        return 0.0;
    }
    let y_overlap = ((a.center[1] + a.dims[2] / 2.0).min(b.center[1] + b.dims[2] / 2.0)
        - (a.center[1] - a.dims[2] / 2.0).max(b.center[1] - b.dims[2] / 2.0))
    .max(0.0);
    if y_overlap == 0.0 {
        return 0.0;
    }
    let area = polygon_area(&bev_intersection(a, b)).abs();
    let inter = area * y_overlap;
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Magnitudes of the corruption applied to ground truths before they become
/// denoising queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Centre shift as a fraction of the box half-extent per axis.
    pub center_shift_scale: f64,
    /// Each edge distance is scaled by a factor in `[1 - s, 1 + s]`.
    pub box_scale_range: f64,
    pub label_flip_prob: f64,
    pub dim_scale_range: f64,
    pub angle_jitter_rad: f64,
    pub depth_jitter_frac: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            center_shift_scale: 0.4,
            box_scale_range: 0.4,
            label_flip_prob: 0.25,
            dim_scale_range: 0.2,
            angle_jitter_rad: PI / 8.0,
            depth_jitter_frac: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            center_shift_scale: 0.0,
            box_scale_range: 0.0,
            label_flip_prob: 0.0,
            dim_scale_range: 0.0,
            angle_jitter_rad: 0.0,
            depth_jitter_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| (0.0..1.0).contains(&v);
        let ok = unit_open(self.center_shift_scale)
            && unit_open(self.box_scale_range)
            && (0.0..=1.0).contains(&self.label_flip_prob)
            && unit_open(self.dim_scale_range)
            && self.angle_jitter_rad >= 0.0
            && unit_open(self.depth_jitter_frac);
        if ok {
            Ok(())
        } else {
            Err(VqdError::Config(format!("noise settings out of range: {self:?}")))
        }
    }
}

/// Corrupted 3D attributes of a denoising query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Noisy3D {
    pub category: usize,
    pub l3d: f64,
    pub w3d: f64,
    pub h3d: f64,
    pub theta: f64,
    pub depth: f64,
}

impl Noisy3D {
    pub fn exact(gt: &GroundTruthObject) -> Self {
        Self { category: gt.category, l3d: gt.l3d, w3d: gt.w3d, h3d: gt.h3d, theta: gt.theta, depth: gt.depth }
    }
}

fn symmetric<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * scale
}

/// Corrupts one ground truth. Every call consumes the same number of draws
/// regardless of the settings, so runs stay aligned across configurations.
pub fn apply_box_noise<R: Rng>(
    gt: &GroundTruthObject,
    cfg: &NoiseConfig,
    num_classes: usize,
    rng: &mut R,
) -> (AnchorBox6D, Noisy3D) {
    let half_w = 0.5 * (gt.l + gt.r);
    let half_h = 0.5 * (gt.t + gt.b);
    let xc = (gt.xc + symmetric(rng, cfg.center_shift_scale) * half_w).clamp(-0.25, 1.25);
    let yc = (gt.yc + symmetric(rng, cfg.center_shift_scale) * half_h).clamp(-0.25, 1.25);
    let mut edge = |v: f64| v * (1.0 + symmetric(rng, cfg.box_scale_range));
    let l = edge(gt.l).clamp(0.0, xc + 0.25);
    let r = edge(gt.r).clamp(0.0, 1.25 - xc);
    let t = edge(gt.t).clamp(0.0, yc + 0.25);
    let b = edge(gt.b).clamp(0.0, 1.25 - yc);

    let flip = rng.random::<f64>() < cfg.label_flip_prob;
    let offset = rng.random_range(0..num_classes.max(2) - 1);
    let category = if flip && num_classes > 1 { (gt.category + 1 + offset) % num_classes } else { gt.category };

    let mut dim = |v: f64| (v * (1.0 + symmetric(rng, cfg.dim_scale_range))).clamp(DIM_FLOOR, MAX_DIM - DIM_FLOOR);
    let (l3d, w3d, h3d) = (dim(gt.l3d), dim(gt.w3d), dim(gt.h3d));
    let theta = wrap_angle(gt.theta + symmetric(rng, cfg.angle_jitter_rad));
    let depth = (gt.depth * (1.0 + symmetric(rng, cfg.depth_jitter_frac))).clamp(MIN_DEPTH + 1e-6, MAX_DEPTH - 1e-6);

    (AnchorBox6D { xc, yc, l, r, t, b }, Noisy3D { category, l3d, w3d, h3d, theta, depth })
}
