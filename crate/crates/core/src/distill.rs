//! Forward-looking distillation: earlier decoder layers are pulled towards
//! the final layer's queries through a shared refinement MLP, weighted by
//! how well the final layer localised the matching object.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VqdError};
use crate::geometry::{iou3d, GroundTruthObject, Intrinsics};
use crate::matching::Assignment;
use crate::model::Prediction;
use crate::numerics::{Graph, ParamId, ParameterStore, Tensor, Var};

/// Two-layer MLP `D -> D -> D` shared by every student layer.
#[derive(Clone, Copy, Debug)]
pub struct RefinerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl RefinerParams {
    pub fn register(store: &mut ParameterStore, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let w1 = store.insert_glorot("distill.fc1.w", width, width, rng);
        let b1 = store.insert("distill.fc1.b", Tensor::zeros(&[width]));
        let w2 = store.insert_glorot("distill.fc2.w", width, width, rng);
        let b2 = store.insert("distill.fc2.b", Tensor::zeros(&[width]));
        Self { w1, b1, w2, b2 }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        g.linear(h, w2, b2)
    }
}

/// One query row taking part in distillation, with its detached weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillTarget {
    pub group: usize,
    pub row: usize,
    pub weight: f64,
}

/// `(query, iou3d)` for every matched query of the final layer.
pub fn iou_weights(
    final_predictions: &[Prediction],
    assignment: &Assignment,
    gts: &[GroundTruthObject],
    intrinsics: &Intrinsics,
) -> Vec<(usize, f64)> {
    assignment
        .pairs
        .iter()
        .map(|&(q, t)| {
            let pred = final_predictions[q].to_box3d(intrinsics);
            (q, iou3d(&pred, &gts[t].to_box3d(intrinsics)))
        })
        .collect()
}

pub fn learnable_targets(
    group: usize,
    final_predictions: &[Prediction],
    assignment: &Assignment,
    gts: &[GroundTruthObject],
    intrinsics: &Intrinsics,
) -> Vec<DistillTarget> {
    iou_weights(final_predictions, assignment, gts, intrinsics)
        .into_iter()
        .map(|(row, weight)| DistillTarget { group, row, weight })
        .collect()
}

/// Noisy rows correspond to their source object by construction:
/// prediction `i` (row `num_learnable + i`) comes from object `i % K`.
pub fn noisy_targets(
    group: usize,
    num_learnable: usize,
    num_objects: usize,
    noisy_predictions: &[Prediction],
    gts: &[GroundTruthObject],
    intrinsics: &Intrinsics,
) -> Vec<DistillTarget> {
    noisy_predictions
        .iter()
        .enumerate()
        .map(|(i, p)| DistillTarget {
            group,
            row: num_learnable + i,
            weight: iou3d(&p.to_box3d(intrinsics), &gts[i % num_objects].to_box3d(intrinsics)),
        })
        .collect()
}

/// Sum over student layers of the weighted mean smooth-L1 distance between
/// refined student rows and the matching teacher rows.
///
/// `students[layer][group]` are the outputs of every layer before the last;
/// `teachers[group]` holds the final layer's values, which enter as
/// constants. Within a layer the per-query losses are averaged over all
/// targets. `refiner = None` skips refinement.
pub fn forward_looking_distill(
    g: &mut Graph,
    store: &ParameterStore,
    students: &[Vec<Var>],
    teachers: &[Tensor],
    targets: &[DistillTarget],
    refiner: Option<&RefinerParams>,
) -> Result<Var> {
    if students.is_empty() || targets.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let num_groups = teachers.len();
    if let Some(t) = targets.iter().find(|t| t.group >= num_groups) {
        return Err(VqdError::CountMismatch(format!("target group {} of {num_groups}", t.group)));
    }
    let by_group: Vec<Vec<&DistillTarget>> =
        (0..num_groups).map(|gi| targets.iter().filter(|t| t.group == gi).collect()).collect();
    let inv = 1.0 / targets.len() as f64;
    let mut layer_terms = Vec::with_capacity(students.len());
    for layer in students {
        if layer.len() != num_groups {
            return Err(VqdError::CountMismatch(format!("{} student groups, {num_groups} teachers", layer.len())));
        }
        let mut parts = Vec::with_capacity(num_groups);
        for (gi, group_targets) in by_group.iter().enumerate() {
            if group_targets.is_empty() {
                continue;
            }
            let rows: Vec<usize> = group_targets.iter().map(|t| t.row).collect();
            let student = g.gather_rows(layer[gi], &rows)?;
            let student = match refiner {
                Some(r) => r.apply(g, store, student)?,
                None => student,
            };
            let width = teachers[gi].cols();
            let teacher_rows: Vec<f64> = rows.iter().flat_map(|&r| teachers[gi].row(r).to_vec()).collect();
            let teacher = g.constant(Tensor::matrix(rows.len(), width, teacher_rows)?);
            let elem = g.smooth_l1_elem(student, teacher)?;
            let per_query = g.row_mean(elem);
            let weights = g.constant(Tensor::matrix(rows.len(), 1, group_targets.iter().map(|t| t.weight).collect())?);
            let weighted = g.mul(per_query, weights)?;
            parts.push(g.sum(weighted));
        }
        let stacked = g.concat_rows(&parts)?;
        let total = g.sum(stacked);
        layer_terms.push(g.scale(total, inv));
    }
    let stacked = g.concat_rows(&layer_terms)?;
    Ok(g.sum(stacked))
}
