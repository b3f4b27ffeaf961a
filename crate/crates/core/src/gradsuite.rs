//! The finite-difference suite behind `vqd grad-check`: every
//! differentiable tape operation, the composite blocks built from them, and
//! the full training objective on a minimal detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_denoising_mask, multihead_attention, AttentionParams};
use crate::distill::{forward_looking_distill, DistillTarget, RefinerParams};
use crate::error::Result;
use crate::losses::{set_prediction_loss, ComponentWeights};
use crate::model::{Detector, DetectorConfig, HeadOutputs};
use crate::numerics::gradcheck::{check_inputs_offset, check_params};
use crate::numerics::{FocalParams, Graph, ParameterStore, Tensor, Var};
use crate::scenes::{generate_scene_with, SceneConfig};
use crate::vqd::{self, DenoisingMode, GeneratorParams};

/// Tolerance for single operations and composite blocks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the full objective.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random instances per primitive operation.
    pub op_instances: usize,
    /// Random instances per composite block.
    pub block_instances: usize,
    pub end_to_end_instances: usize,
    /// Added to every analytic gradient; nonzero values must make the suite fail.
    pub perturb: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, op_instances: 50, block_instances: 5, end_to_end_instances: 2, perturb: 0.0 }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values at least `margin` away from every point in `kinks`.
fn avoiding(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > 1e-2) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(y * w)` with fixed random weights so every output entry matters.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Setup = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Tensor)>;
type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    setup: Setup,
    body: Body,
}

fn op(name: &'static str, setup: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Tensor) + 'static, body: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, setup: Box::new(setup), body: Box::new(body) }
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64]) -> (Vec<Tensor>, Tensor) {
    (vec![avoiding(rng, &[3, 4], lo, hi, kinks)], uniform(rng, &[3, 4], -1.0, 1.0))
}

fn binary(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Tensor) {
    (vec![uniform(rng, &[2, 3], -2.0, 2.0), uniform(rng, &[2, 3], -2.0, 2.0)], uniform(rng, &[2, 3], -1.0, 1.0))
}

fn primitive_cases() -> Vec<OpCase> {
    vec![
        op("matmul", |r| (vec![uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5, 3], -1.0, 1.0)], uniform(r, &[4, 3], -1.0, 1.0)), |g, v| g.matmul(v[0], v[1])),
        op("matmul_bt", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)], uniform(r, &[3, 5], -1.0, 1.0)), |g, v| g.matmul_bt(v[0], v[1])),
        op("transpose", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0)], uniform(r, &[4, 3], -1.0, 1.0)), |g, v| Ok(g.transpose(v[0]))),
        op("add", binary, |g, v| g.add(v[0], v[1])),
        op("sub", binary, |g, v| g.sub(v[0], v[1])),
        op("mul", binary, |g, v| g.mul(v[0], v[1])),
        op("div", |r| {
            let mut d = uniform(r, &[2, 3], 0.5, 2.0);
            d.data_mut().iter_mut().for_each(|x| if r.random::<bool>() { *x = -*x });
            (vec![uniform(r, &[2, 3], -2.0, 2.0), d], uniform(r, &[2, 3], -1.0, 1.0))
        }, |g, v| g.div(v[0], v[1])),
        op("maximum", separated_pair, |g, v| g.maximum(v[0], v[1])),
        op("minimum", separated_pair, |g, v| g.minimum(v[0], v[1])),
        op("add_row", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], uniform(r, &[3, 4], -1.0, 1.0)), |g, v| g.add_row(v[0], v[1])),
        op("scale", |r| unary(r, -2.0, 2.0, &[]), |g, v| Ok(g.scale(v[0], -1.7))),
        op("add_scalar", |r| unary(r, -2.0, 2.0, &[]), |g, v| Ok(g.add_scalar(v[0], 0.3))),
        op("relu", |r| unary(r, -2.0, 2.0, &[0.0]), |g, v| Ok(g.relu(v[0]))),
        op("sigmoid", |r| unary(r, -4.0, 4.0, &[]), |g, v| Ok(g.sigmoid(v[0]))),
        op("softplus", |r| unary(r, -4.0, 4.0, &[]), |g, v| Ok(g.softplus(v[0]))),
        op("exp", |r| unary(r, -2.0, 2.0, &[]), |g, v| Ok(g.exp(v[0]))),
        op("abs", |r| unary(r, -2.0, 2.0, &[0.0]), |g, v| Ok(g.abs(v[0]))),
        op("clamp", |r| unary(r, -2.0, 2.0, &[-1.0, 1.0]), |g, v| Ok(g.clamp(v[0], -1.0, 1.0))),
        op("softmax_rows", |r| unary(r, -3.0, 3.0, &[]), |g, v| g.softmax_rows(v[0], None)),
        op("softmax_rows_masked", |r| {
            let x = uniform(r, &[4, 4], -3.0, 3.0);
            // the mask itself is rebuilt from a fixed pattern in the body
            (vec![x], uniform(r, &[4, 4], -1.0, 1.0))
        }, |g, v| {
            let mask = build_denoising_mask(2, 1, 2);
            g.softmax_rows(v[0], Some(mask.shared()))
        }),
        op("layer_norm", |r| (vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[5], 0.5, 1.5), uniform(r, &[5], -0.5, 0.5)], uniform(r, &[3, 5], -1.0, 1.0)), |g, v| g.layer_norm(v[0], v[1], v[2])),
        op("linear", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)], uniform(r, &[3, 2], -1.0, 1.0)), |g, v| g.linear(v[0], v[1], v[2])),
        op("concat_rows", |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)], uniform(r, &[3, 3], -1.0, 1.0)), |g, v| g.concat_rows(&[v[0], v[1]])),
        op("concat_cols", |r| (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 1], -1.0, 1.0)], uniform(r, &[2, 4], -1.0, 1.0)), |g, v| g.concat_cols(&[v[0], v[1]])),
        op("slice_rows", |r| (vec![uniform(r, &[4, 3], -1.0, 1.0)], uniform(r, &[2, 3], -1.0, 1.0)), |g, v| g.slice_rows(v[0], 1, 2)),
        op("slice_cols", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0)], uniform(r, &[3, 2], -1.0, 1.0)), |g, v| g.slice_cols(v[0], 2, 2)),
        op("gather_rows", |r| (vec![uniform(r, &[3, 2], -1.0, 1.0)], uniform(r, &[4, 2], -1.0, 1.0)), |g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        op("sum", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0)], Tensor::scalar(0.7)), |g, v| Ok(g.sum(v[0]))),
        op("mean", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0)], Tensor::scalar(0.7)), |g, v| Ok(g.mean(v[0]))),
        op("row_sum", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0)], uniform(r, &[3, 1], -1.0, 1.0)), |g, v| Ok(g.row_sum(v[0]))),
        op("row_mean", |r| (vec![uniform(r, &[3, 4], -1.0, 1.0)], uniform(r, &[3, 1], -1.0, 1.0)), |g, v| Ok(g.row_mean(v[0]))),
        op("smooth_l1_elem", smooth_pair, |g, v| g.smooth_l1_elem(v[0], v[1])),
        op("smooth_l1", |r| (smooth_pair(r).0, Tensor::scalar(1.0)), |g, v| {
            let s = g.smooth_l1(v[0], v[1])?;
            Ok(g.scale(s, 3.0))
        }),
        op("gaussian_kl", |r| (vec![uniform(r, &[3, 4], -1.5, 1.5), uniform(r, &[3, 4], -2.0, 2.0)], Tensor::scalar(1.0)), |g, v| g.gaussian_kl(v[0], v[1])),
        op("focal_loss", |r| (vec![uniform(r, &[4, 3], -4.0, 4.0)], Tensor::scalar(1.0)), |g, v| {
            let targets = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]])?;
            g.focal_loss(v[0], &targets, FocalParams::default())
        }),
    ]
}

fn separated_pair(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Tensor) {
    let a = uniform(r, &[2, 3], -2.0, 2.0);
    let mut b = uniform(r, &[2, 3], -2.0, 2.0);
    for (x, y) in a.data().iter().zip(b.data_mut()) {
        if (x - *y).abs() < 1e-2 {
            *y = x + 0.5;
        }
    }
    (vec![a, b], uniform(r, &[2, 3], -1.0, 1.0))
}

fn smooth_pair(r: &mut ChaCha8Rng) -> (Vec<Tensor>, Tensor) {
    let target = uniform(r, &[3, 3], -1.0, 1.0);
    let diff = avoiding(r, &[3, 3], -2.5, 2.5, &[-1.0, 0.0, 1.0]);
    let pred: Vec<f64> = target.data().iter().zip(diff.data()).map(|(t, d)| t + d).collect();
    (vec![Tensor::new(vec![3, 3], pred).expect("shape"), target], uniform(r, &[3, 3], -1.0, 1.0))
}

/// Minimal detector used by the block and end-to-end checks.
pub fn minimal_config() -> DetectorConfig {
    DetectorConfig {
        groups: 2,
        queries_per_group: 2,
        noisy_groups: 1,
        width: 8,
        layers: 2,
        heads: 2,
        grid_size: 4,
        ..DetectorConfig::default()
    }
}

fn minimal_scene(seed: u64, objects: usize) -> crate::scenes::Scene {
    let cfg = SceneConfig { grid_size: 4, ..SceneConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene_with(&mut rng, &cfg, seed, seed, Some(objects))
}

fn run_primitives(opts: &SuiteOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    for (k, case) in primitive_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(k as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..opts.op_instances {
            let (inputs, weights) = (case.setup)(&mut rng);
            let body = &case.body;
            let err = check_inputs_offset(&inputs, opts.perturb, |g, v| {
                let y = body(g, v)?;
                project(g, y, &weights)
            })?;
            worst = worst.max(err);
        }
        out.push(CheckResult { name: case.name, instances: opts.op_instances, max_rel_error: worst, tolerance: OP_TOLERANCE });
    }
    Ok(())
}

fn block<F>(out: &mut Vec<CheckResult>, name: &'static str, opts: &SuiteOptions, tolerance: f64, instances: usize, mut f: F) -> Result<()>
where
    F: FnMut(u64) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        worst = worst.max(f(opts.seed.wrapping_mul(7919).wrapping_add(i as u64))?);
    }
    out.push(CheckResult { name, instances, max_rel_error: worst, tolerance });
    Ok(())
}

fn run_blocks(opts: &SuiteOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let n = opts.block_instances;
    let p = opts.perturb;

    block(out, "masked_multihead_attention", opts, OP_TOLERANCE, n, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        let params = AttentionParams::register(&mut store, "attn", 4, &mut rng);
        perturb_store(&mut store, &mut rng);
        let mask = build_denoising_mask(2, 1, 2);
        let x = uniform(&mut rng, &[4, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 4], -1.0, 1.0);
        let wrt_input = check_inputs_offset(std::slice::from_ref(&x), p, |g, v| {
            let a = multihead_attention(g, &store, &params, v[0], v[0], v[0], 2, Some(&mask))?;
            project(g, a.output, &w)
        })?;
        let wrt_params = check_params(&store, p, |g, s| {
            let xv = g.constant(x.clone());
            let a = multihead_attention(g, s, &params, xv, xv, xv, 2, Some(&mask))?;
            project(g, a.output, &w)
        })?;
        Ok(wrt_input.max(wrt_params))
    })?;

    block(out, "encode_features", opts, OP_TOLERANCE, n, |seed| {
        let (det, store) = Detector::new(minimal_config(), seed)?;
        let scene = minimal_scene(seed, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = uniform(&mut rng, &[16, 8], -0.2, 0.2);
        check_params(&store, p, |g, s| {
            let m = det.encode_features(g, s, &scene.grid)?;
            project(g, m, &w)
        })
    })?;

    block(out, "decoder_forward", opts, OP_TOLERANCE, n, |seed| {
        let (det, store) = Detector::new(minimal_config(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = uniform(&mut rng, &[16, 8], -1.0, 1.0);
        let queries: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[3, 8], -1.0, 1.0)).collect();
        let refs: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[3, 6], -1.0, 1.0)).collect();
        let w = uniform(&mut rng, &[3, 8], -0.5, 0.5);
        let mask = build_denoising_mask(2, 1, 1);
        let run = |g: &mut Graph, s: &ParameterStore, qv: Vec<Var>| -> Result<Var> {
            let mem = g.constant(memory.clone());
            let rv: Vec<Var> = refs.iter().map(|r| g.constant(r.clone())).collect();
            let set = crate::attention::GroupQuerySet { groups: qv, num_learnable: 2, num_objects: 1, num_noisy_groups: 1, width: 8 };
            let trace = det.decoder_forward(g, s, mem, &set, &rv, &mask)?;
            let mut terms = Vec::new();
            for layer in &trace.layers {
                for (&q, h) in layer.queries.iter().zip(&layer.heads) {
                    terms.push(project(g, q, &w)?);
                    let d = g.sum(h.depth);
                    terms.push(g.scale(d, 0.01));
                    let c = g.sum(h.center);
                    terms.push(c);
                }
            }
            let stacked = g.concat_rows(&terms)?;
            Ok(g.sum(stacked))
        };
        let wrt_params = check_params(&store, p, |g, s| {
            let qv = queries.iter().map(|q| g.constant(q.clone())).collect();
            run(g, s, qv)
        })?;
        let wrt_queries = check_inputs_offset(&queries, p, |g, v| run(g, &store, v.to_vec()))?;
        Ok(wrt_params.max(wrt_queries))
    })?;

    block(out, "variational_query_generation", opts, OP_TOLERANCE, n, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        let gp = GeneratorParams::register(&mut store, 8, 3, &mut rng);
        perturb_store(&mut store, &mut rng);
        let scene = minimal_scene(seed, 2);
        let boxes: Vec<_> = scene.objects.iter().map(crate::geometry::Noisy3D::exact).collect();
        let eps = uniform(&mut rng, &[2, 8], -1.5, 1.5);
        let w = uniform(&mut rng, &[2, 8], -1.0, 1.0);
        check_params(&store, p, |g, s| {
            let dist = vqd::encode_noisy_boxes(g, s, &gp, &boxes)?;
            let z = vqd::reparameterize_with(g, &dist, eps.clone())?;
            let rec = project(g, z, &w)?;
            let terms = vqd::denoising_loss(g, rec, &[dist], DenoisingMode::Variational, 0.3)?;
            Ok(terms.total)
        })
    })?;

    block(out, "set_prediction_loss", opts, OP_TOLERANCE, opts.op_instances, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = minimal_scene(seed, 2);
        let rows = 4;
        let inputs = vec![
            uniform(&mut rng, &[rows, 3], -3.0, 3.0),
            uniform(&mut rng, &[rows, 2], 0.2, 0.8),
            uniform(&mut rng, &[rows, 4], 0.02, 0.3),
            uniform(&mut rng, &[rows, 3], 0.5, 6.0),
            uniform(&mut rng, &[rows, 2], -1.0, 1.0),
            uniform(&mut rng, &[rows, 1], 5.0, 40.0),
        ];
        let matches = vec![(1, scene.objects[0]), (3, scene.objects[1])];
        check_inputs_offset(&inputs, p, |g, v| {
            let heads = HeadOutputs { logits: v[0], center: v[1], lrtb: v[2], dims: v[3], orient: v[4], depth: v[5] };
            let sl = set_prediction_loss(g, &heads, 0..rows, &matches, 2.0, &ComponentWeights::default(), FocalParams::default())?;
            Ok(sl.total)
        })
    })?;

    block(out, "forward_looking_distill", opts, OP_TOLERANCE, n, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        let refiner = RefinerParams::register(&mut store, 4, &mut rng);
        perturb_store(&mut store, &mut rng);
        let students: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[3, 4], -1.5, 1.5)).collect();
        let teachers = vec![uniform(&mut rng, &[3, 4], -1.5, 1.5), uniform(&mut rng, &[3, 4], -1.5, 1.5)];
        let targets = vec![
            DistillTarget { group: 0, row: 0, weight: 0.8 },
            DistillTarget { group: 0, row: 2, weight: 0.3 },
            DistillTarget { group: 1, row: 1, weight: 0.55 },
        ];
        let loss = |g: &mut Graph, s: &ParameterStore, v: &[Var]| {
            let layers = vec![vec![v[0], v[1]], vec![v[2], v[3]]];
            forward_looking_distill(g, s, &layers, &teachers, &targets, Some(&refiner))
        };
        let wrt_students = check_inputs_offset(&students, p, |g, v| loss(g, &store, v))?;
        let wrt_params = check_params(&store, p, |g, s| {
            let v: Vec<Var> = students.iter().map(|t| g.constant(t.clone())).collect();
            loss(g, s, &v)
        })?;
        Ok(wrt_students.max(wrt_params))
    })?;
    Ok(())
}

/// Moves freshly initialised biases and gains off their round defaults so
/// every parameter takes a generic value.
fn perturb_store(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Full objective (detection, variational denoising and distillation) of a
/// minimal detector on one scene, with matching, IoU weights and teacher
/// values frozen from an unperturbed pass.
pub fn end_to_end_error(seed: u64, perturb: f64) -> Result<f64> {
    let (det, mut store) = Detector::new(minimal_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    perturb_store(&mut store, &mut rng);
    let scene = minimal_scene(seed, 1);
    let beta = 0.1;
    let mut g = Graph::new();
    let frozen = det.training_forward(&mut g, &store, &scene, beta, &mut ChaCha8Rng::seed_from_u64(seed), None)?.decisions;
    check_params(&store, perturb, |g, s| {
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        Ok(det.training_forward(g, s, &scene, beta, &mut noise, Some(&frozen))?.overall)
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    run_primitives(opts, &mut out)?;
    run_blocks(opts, &mut out)?;
    block(&mut out, "end_to_end_objective", opts, END_TO_END_TOLERANCE, opts.end_to_end_instances, |seed| {
        end_to_end_error(seed, opts.perturb)
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_fails_the_suite() {
        let opts = SuiteOptions { op_instances: 1, block_instances: 1, end_to_end_instances: 0, perturb: 0.5, ..SuiteOptions::default() };
        let results = run_suite(&opts).unwrap();
        assert!(results.iter().filter(|r| r.instances > 0).all(|r| !r.passed()));
    }

    #[test]
    fn names_are_unique() {
        let opts = SuiteOptions { op_instances: 1, block_instances: 1, end_to_end_instances: 1, ..SuiteOptions::default() };
        let results = run_suite(&opts).unwrap();
        let mut names: Vec<_> = results.iter().map(|r| r.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), results.len());
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }
}
