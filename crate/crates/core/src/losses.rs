//! Set-prediction loss shared by detection (matched learnable queries) and
//! reconstruction (noisy queries with known targets).

use std::ops::Range;

use crate::error::Result;
use crate::geometry::GroundTruthObject;
use crate::model::HeadOutputs;
use crate::numerics::{FocalParams, Graph, Tensor, Var};

/// Per-component weights inside the detection loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentWeights {
    pub class: f64,
    pub center: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub dims: f64,
    pub orient: f64,
    pub depth: f64,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        Self { class: 2.0, center: 10.0, box_l1: 5.0, giou: 2.0, dims: 1.0, orient: 1.0, depth: 0.2 }
    }
}

/// Unweighted component values of one evaluation, already normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ComponentValues {
    pub class: f64,
    pub center: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub dims: f64,
    pub orient: f64,
    pub depth: f64,
}

pub struct SetLoss {
    pub total: Var,
    pub values: ComponentValues,
}

/// Focal loss over every row in `rows` plus L1/GIoU regression over the
/// `(row, target)` pairs, all divided by `normalizer`.
///
/// Rows in `matches` are absolute indices into `heads`. Unmatched rows in
/// the range are pushed towards background.
pub fn set_prediction_loss(
    g: &mut Graph,
    heads: &HeadOutputs,
    rows: Range<usize>,
    matches: &[(usize, GroundTruthObject)],
    normalizer: f64,
    w: &ComponentWeights,
    focal: FocalParams,
) -> Result<SetLoss> {
    let num_classes = g.value(heads.logits).cols();
    let len = rows.len();
    let mut targets = vec![0.0; len * num_classes];
    for (row, gt) in matches {
        debug_assert!(rows.contains(row));
        targets[(row - rows.start) * num_classes + gt.category] = 1.0;
    }
    let logits = g.slice_rows(heads.logits, rows.start, len)?;
    let class = g.focal_loss(logits, &Tensor::matrix(len, num_classes, targets)?, focal)?;
    let inv = 1.0 / normalizer;
    let mut terms = vec![(w.class, g.scale(class, inv))];

    if !matches.is_empty() {
        let idx: Vec<usize> = matches.iter().map(|m| m.0).collect();
        let m = idx.len();
        let col = |f: &dyn Fn(&GroundTruthObject) -> Vec<f64>, width: usize| {
            Tensor::matrix(m, width, matches.iter().flat_map(|(_, gt)| f(gt)).collect()).unwrap()
        };
        let center = g.gather_rows(heads.center, &idx)?;
        let lrtb = g.gather_rows(heads.lrtb, &idx)?;
        let dims = g.gather_rows(heads.dims, &idx)?;
        let orient = g.gather_rows(heads.orient, &idx)?;
        let depth = g.gather_rows(heads.depth, &idx)?;

        let t_center = col(&|gt| vec![gt.xc, gt.yc], 2);
        let t_lrtb = col(&|gt| vec![gt.l, gt.r, gt.t, gt.b], 4);
        let t_dims = col(&|gt| vec![gt.l3d, gt.w3d, gt.h3d], 3);
        let t_orient = col(&|gt| vec![gt.theta.sin(), gt.theta.cos()], 2);
        let t_depth = col(&|gt| vec![gt.depth], 1);

        let l1 = |g: &mut Graph, pred: Var, target: Tensor| -> Result<Var> {
            let t = g.constant(target);
            let d = g.sub(pred, t)?;
            let a = g.abs(d);
            let s = g.sum(a);
            Ok(g.scale(s, inv))
        };
        let center_l = l1(g, center, t_center)?;
        let lrtb_l = l1(g, lrtb, t_lrtb)?;
        let dims_l = l1(g, dims, t_dims)?;
        let orient_l = l1(g, orient, t_orient)?;
        let depth_l = l1(g, depth, t_depth)?;
        let giou = giou_loss(g, center, lrtb, matches)?;
        let giou_l = g.scale(giou, inv);
        terms.extend([
            (w.center, center_l),
            (w.box_l1, lrtb_l),
            (w.giou, giou_l),
            (w.dims, dims_l),
            (w.orient, orient_l),
            (w.depth, depth_l),
        ]);
    }

    let mut values = ComponentValues::default();
    let slots = [
        &mut values.class,
        &mut values.center,
        &mut values.box_l1,
        &mut values.giou,
        &mut values.dims,
        &mut values.orient,
        &mut values.depth,
    ];
    for ((_, v), slot) in terms.iter().zip(slots) {
        *slot = g.scalar(*v);
    }
    let mut total: Option<Var> = None;
    for (weight, v) in terms {
        let wv = g.scale(v, weight);
        total = Some(match total {
            Some(t) => g.add(t, wv)?,
            None => wv,
        });
    }
    Ok(SetLoss { total: total.expect("class term always present"), values })
}

/// `sum(1 - GIoU)` between predicted boxes (from centre and edge distances)
/// and the targets' 2D boxes.
fn giou_loss(g: &mut Graph, center: Var, lrtb: Var, matches: &[(usize, GroundTruthObject)]) -> Result<Var> {
    let m = matches.len();
    let column = |g: &mut Graph, f: &dyn Fn(&GroundTruthObject) -> f64| {
        g.constant(Tensor::matrix(m, 1, matches.iter().map(|(_, gt)| f(gt)).collect()).unwrap())
    };
    let tx1 = column(g, &|gt| gt.xc - gt.l);
    let tx2 = column(g, &|gt| gt.xc + gt.r);
    let ty1 = column(g, &|gt| gt.yc - gt.t);
    let ty2 = column(g, &|gt| gt.yc + gt.b);
    let t_area = column(g, &|gt| (gt.l + gt.r) * (gt.t + gt.b));

    let cx = g.slice_cols(center, 0, 1)?;
    let cy = g.slice_cols(center, 1, 1)?;
    let l = g.slice_cols(lrtb, 0, 1)?;
    let r = g.slice_cols(lrtb, 1, 1)?;
    let t = g.slice_cols(lrtb, 2, 1)?;
    let b = g.slice_cols(lrtb, 3, 1)?;
    let x1 = g.sub(cx, l)?;
    let x2 = g.add(cx, r)?;
    let y1 = g.sub(cy, t)?;
    let y2 = g.add(cy, b)?;

    let ix2 = g.minimum(x2, tx2)?;
    let ix1 = g.maximum(x1, tx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let iy2 = g.minimum(y2, ty2)?;
    let iy1 = g.maximum(y1, ty1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let pw = g.add(l, r)?;
    let ph = g.add(t, b)?;
    let p_area = g.mul(pw, ph)?;
    let areas = g.add(p_area, t_area)?;
    let union = g.sub(areas, inter)?;
    let iou = g.div(inter, union)?;

    let hx2 = g.maximum(x2, tx2)?;
    let hx1 = g.minimum(x1, tx1)?;
    let hw = g.sub(hx2, hx1)?;
    let hy2 = g.maximum(y2, ty2)?;
    let hy1 = g.minimum(y1, ty1)?;
    let hh = g.sub(hy2, hy1)?;
    let hull = g.mul(hw, hh)?;
    let gap = g.sub(hull, union)?;
    let penalty = g.div(gap, hull)?;
    let giou = g.sub(iou, penalty)?;
    let s = g.sum(giou);
    let neg = g.scale(s, -1.0);
    Ok(g.add_scalar(neg, m as f64))
}
