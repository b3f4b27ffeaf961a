//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqd_core::attention::{build_denoising_mask, separated_group_attention, AttentionParams, GroupQuerySet};
use vqd_core::geometry::OrientedBox3D;
use vqd_core::matching::CostMatrix;
use vqd_core::model::{Detector, DetectorConfig};
use vqd_core::numerics::{Graph, ParameterStore, Tensor};
use vqd_core::scenes::ScoredDetection;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Minimum total cost over every injective assignment of the smaller side,
/// by enumerating permutations.
pub fn brute_force_assignment(cost: &CostMatrix) -> f64 {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return 0.0;
    }
    if n <= m {
        (0..m).permutations(n).map(|cols| cols.iter().enumerate().map(|(r, &c)| cost.at(r, c)).sum::<f64>()).fold(f64::INFINITY, f64::min)
    } else {
        (0..n).permutations(m).map(|rows| rows.iter().enumerate().map(|(c, &r)| cost.at(r, c)).sum::<f64>()).fold(f64::INFINITY, f64::min)
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox3D {
    OrientedBox3D {
        center: [rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5), rng.random_range(8.5..11.5)],
        dims: [rng.random_range(0.5..4.0), rng.random_range(0.5..2.5), rng.random_range(0.5..2.0)],
        yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

/// A second box overlapping `a` most of the time.
pub fn nearby_box(rng: &mut ChaCha8Rng, a: &OrientedBox3D) -> OrientedBox3D {
    let mut b = random_box(rng);
    for i in 0..3 {
        b.center[i] = a.center[i] + rng.random_range(-1.0..1.0) * a.dims[i].max(b.dims[i]) * 0.6;
    }
    b
}

fn bounding_box(b: &OrientedBox3D) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in b.corners() {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (lo, hi)
}

/// Volume IoU estimated from uniform points in the joint bounding box.
pub fn monte_carlo_iou3d(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (la, ha) = bounding_box(a);
    let (lb, hb) = bounding_box(b);
    let lo: [f64; 3] = std::array::from_fn(|i| la[i].min(lb[i]));
    let hi: [f64; 3] = std::array::from_fn(|i| ha[i].max(hb[i]));
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p: [f64; 3] = std::array::from_fn(|i| rng.random_range(lo[i]..hi[i]));
        let (ia, ib) = (a.contains(p), b.contains(p));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Four ground truths in one scene and four detections: ranks 1 and 2 hit,
/// ranks 3 and 4 miss.
pub fn four_detection_case() -> (Vec<ScoredDetection>, Vec<Vec<(usize, OrientedBox3D)>>) {
    let gt = |x: f64| OrientedBox3D { center: [x, 0.0, 20.0], dims: [2.0, 2.0, 2.0], yaw: 0.0 };
    let gts = vec![(0..4).map(|i| (0, gt(10.0 * i as f64))).collect::<Vec<_>>()];
    let det = |x: f64, score: f64| ScoredDetection { scene: 0, category: 0, score, box3d: gt(x) };
    let dets = vec![det(0.0, 0.9), det(10.0, 0.8), det(100.0, 0.7), det(200.0, 0.6)];
    (dets, gts)
}

/// The 40-point interpolation of the four-detection case executed by hand:
/// precision 1 at recall 1/4 and 2/4, so recall points 1..=20 score 1 and
/// points 21..=40 score 0.
pub const FOUR_DETECTION_AP: f64 = 20.0 / 40.0;

/// Outcome of the mask checks on one random configuration.
#[derive(Debug, Default)]
pub struct MaskReport {
    /// Largest |gradient| of the learnable-block loss w.r.t. noisy inputs.
    pub leakage: f64,
    /// Largest |gradient| of group 0's loss w.r.t. other groups' inputs.
    pub cross_group: f64,
    /// Disallowed attention entries that are not exactly zero.
    pub pattern_violations: usize,
    /// Largest deviation of an attention row sum from 1.
    pub row_sum_error: f64,
}

/// Random `(G, N, K, C, D, H)` drawn from small ranges; `C, K >= 1` so the
/// noisy block exists.
pub fn random_mask_config(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize) {
    let heads = rng.random_range(1..=2usize);
    let width = 4 * heads * rng.random_range(1..=2usize);
    (rng.random_range(2..=3), rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=3), width, heads)
}

/// Checks one attention block and one full decoder pass on the same
/// configuration, with a random linear loss over group 0's learnable rows.
pub fn mask_report(seed: u64) -> MaskReport {
    mask_report_with(seed, false)
}

/// `unmasked = true` swaps in an all-true mask of the same size, a negative
/// control under which leakage must appear.
pub fn mask_report_with(seed: u64, unmasked: bool) -> MaskReport {
    let mut r = rng(seed);
    let (groups, n, k, c, width, heads) = random_mask_config(&mut r);
    let s = n + k * c;
    let mask = if unmasked { build_denoising_mask(s, 0, 0) } else { build_denoising_mask(n, k, c) };
    let mut report = MaskReport::default();

    let mut store = ParameterStore::new(seed);
    let params = AttentionParams::register(&mut store, "attn", width, &mut r);
    let inputs: Vec<Tensor> = (0..groups).map(|_| random_matrix(&mut r, s, width, 1.0)).collect();
    let weights = random_matrix(&mut r, n, width, 1.0);
    {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let set = GroupQuerySet { groups: vars.clone(), num_learnable: n, num_objects: k, num_noisy_groups: c, width };
        let outs = separated_group_attention(&mut g, &store, &set, &mask, &params, heads).unwrap();
        for o in &outs {
            inspect_map(&o.attn_map, &mask, &mut report);
        }
        let learn = g.slice_rows(outs[0].output, 0, n).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(learn, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        record_grads(&grads.get(vars[0]), &grads_of(&grads, &vars[1..]), n, width, &mut report);
    }

    let cfg = DetectorConfig {
        groups,
        queries_per_group: n,
        noisy_groups: c,
        width,
        layers: 2,
        heads,
        grid_size: 3,
        ..DetectorConfig::default()
    };
    let (detector, store) = Detector::new(cfg, seed).unwrap();
    let grid = Tensor::new(vec![3, 3, vqd_core::scenes::GRID_CHANNELS], (0..9 * vqd_core::scenes::GRID_CHANNELS).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let refs: Vec<Tensor> = (0..groups).map(|_| random_matrix(&mut r, s, 6, 1.0)).collect();
    let mut g = Graph::new();
    let memory = detector.encode_features(&mut g, &store, &grid).unwrap();
    let qvars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let rvars: Vec<_> = refs.iter().map(|t| g.input(t.clone())).collect();
    let set = GroupQuerySet { groups: qvars.clone(), num_learnable: n, num_objects: k, num_noisy_groups: c, width };
    let trace = detector.decoder_forward(&mut g, &store, memory, &set, &rvars, &mask).unwrap();
    for layer in &trace.layers {
        for m in &layer.attn_maps {
            inspect_map(m, &mask, &mut report);
        }
    }
    let last = trace.num_layers() - 1;
    let learn = trace.learnable_queries(&mut g, last, 0).unwrap();
    let w = g.constant(weights);
    let prod = g.mul(learn, w).unwrap();
    let mut loss = g.sum(prod);
    let heads_out = &trace.layers[last].heads[0];
    for h in [heads_out.logits, heads_out.center, heads_out.lrtb, heads_out.depth] {
        let rows = g.slice_rows(h, 0, n).unwrap();
        let s = g.sum(rows);
        loss = g.add(loss, s).unwrap();
    }
    let grads = g.backward(loss).unwrap();
    record_grads(&grads.get(qvars[0]), &grads_of(&grads, &qvars[1..]), n, width, &mut report);
    record_grads(&grads.get(rvars[0]), &grads_of(&grads, &rvars[1..]), n, 6, &mut report);
    report
}

fn grads_of(grads: &vqd_core::numerics::Gradients, vars: &[vqd_core::numerics::Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

fn record_grads(own: &Tensor, others: &[Tensor], n: usize, width: usize, report: &mut MaskReport) {
    report.leakage = report.leakage.max(own.data()[n * width..].iter().fold(0.0, |m, v| m.max(v.abs())));
    for o in others {
        report.cross_group = report.cross_group.max(o.max_abs());
    }
}

fn inspect_map(map: &Tensor, mask: &vqd_core::attention::AttentionMask, report: &mut MaskReport) {
    let s = mask.size();
    for row in 0..s {
        let mut sum = 0.0;
        for col in 0..s {
            let v = map.at(row, col);
            if !mask.allows(row, col) && v != 0.0 {
                report.pattern_violations += 1;
            }
            sum += v;
        }
        report.row_sum_error = report.row_sum_error.max((sum - 1.0).abs());
    }
}
