//! The toy detector: a one-layer encoder over a synthetic feature grid, an
//! `L`-layer decoder over grouped learnable and noisy queries, shared
//! prediction heads, the training objective and inference.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_denoising_mask, concat_group_queries, multihead_attention, separated_group_attention, AttentionMask,
    AttentionParams, GroupQuerySet,
};
use crate::distill::{self, DistillTarget, RefinerParams};
use crate::error::{Result, VqdError};
use crate::geometry::{apply_box_noise, AnchorBox6D, CornerBox, GroundTruthObject, Intrinsics, NoiseConfig, OrientedBox3D};
use crate::losses::{set_prediction_loss, ComponentValues, ComponentWeights};
use crate::matching::{groupwise_match, Assignment, MatcherWeights};
use crate::numerics::{FocalParams, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::scenes::Scene;
use crate::vqd::{self, DenoisingConfig, GeneratorParams, LatentDistribution};

/// `lambda_1 L_det + lambda_2 L_DN + lambda_3 L_distill`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub det: f64,
    pub dn: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { det: 1.0, dn: 1.0, distill: 0.5 }
    }
}

pub fn overall_loss(det: f64, dn: f64, distill: f64, w: &LossWeights) -> f64 {
    w.det * det + w.dn * dn + w.distill * distill
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub groups: usize,
    pub queries_per_group: usize,
    pub noisy_groups: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub grid_size: usize,
    pub input_channels: usize,
    pub loss_weights: LossWeights,
    pub components: ComponentWeights,
    pub matcher: MatcherWeights,
    pub noise: NoiseConfig,
    pub denoising: DenoisingConfig,
    pub confidence_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            queries_per_group: 16,
            noisy_groups: 3,
            width: 64,
            layers: 4,
            heads: 4,
            num_classes: 3,
            grid_size: 16,
            input_channels: crate::scenes::GRID_CHANNELS,
            loss_weights: LossWeights::default(),
            components: ComponentWeights::default(),
            matcher: MatcherWeights::default(),
            noise: NoiseConfig::default(),
            denoising: DenoisingConfig::default(),
            confidence_threshold: 0.2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(VqdError::Config(m));
        if self.groups == 0 || self.queries_per_group == 0 || self.layers == 0 || self.heads == 0 {
            return fail("groups, queries_per_group, layers and heads must be at least 1".into());
        }
        if self.num_classes == 0 || self.grid_size == 0 || self.input_channels == 0 {
            return fail("num_classes, grid_size and input_channels must be at least 1".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.width.is_multiple_of(4) {
            return fail(format!("width {} must be a multiple of 4", self.width));
        }
        let lw = self.loss_weights;
        if lw.det < 0.0 || lw.dn < 0.0 || lw.distill < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return fail("confidence_threshold must lie in [0, 1]".into());
        }
        if self.denoising.beta < 0.0 {
            return fail("beta must be non-negative".into());
        }
        self.noise.validate()
    }
}

/// Head outputs for every row of one group's query matrix.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub center: Var,
    pub lrtb: Var,
    pub dims: Var,
    pub orient: Var,
    pub depth: Var,
}

/// Decoded values of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub center: [f64; 2],
    pub lrtb: [f64; 4],
    pub dims: [f64; 3],
    /// `(sin yaw, cos yaw)`, unnormalised.
    pub orient: [f64; 2],
    pub depth: f64,
}

impl Prediction {
    pub fn anchor(&self) -> AnchorBox6D {
        let [l, r, t, b] = self.lrtb;
        AnchorBox6D { xc: self.center[0], yc: self.center[1], l, r, t, b }
    }

    pub fn yaw(&self) -> f64 {
        self.orient[0].atan2(self.orient[1])
    }

    pub fn to_box3d(&self, intrinsics: &Intrinsics) -> OrientedBox3D {
        OrientedBox3D {
            center: intrinsics.unproject(self.center[0], self.center[1], self.depth),
            dims: self.dims,
            yaw: self.yaw(),
        }
    }

    /// Most likely class and its probability; ties go to the lower index.
    pub fn top_class(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &p) in self.class_probs.iter().enumerate() {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }
}

/// One decoder layer's outputs for every group.
pub struct LayerRecord {
    /// Output queries per group, each `S x D`.
    pub queries: Vec<Var>,
    pub heads: Vec<HeadOutputs>,
    /// Head-averaged self-attention map per group.
    pub attn_maps: Vec<Tensor>,
}

/// Per-layer queries and predictions of one decoder pass.
pub struct DecoderTrace {
    pub layers: Vec<LayerRecord>,
    pub num_learnable: usize,
    pub num_objects: usize,
    pub num_noisy_groups: usize,
}

impl DecoderTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn size(&self) -> usize {
        self.num_learnable + self.num_objects * self.num_noisy_groups
    }

    pub fn learnable_queries(&self, g: &mut Graph, layer: usize, group: usize) -> Result<Var> {
        g.slice_rows(self.layers[layer].queries[group], 0, self.num_learnable)
    }

    pub fn noisy_queries(&self, g: &mut Graph, layer: usize, group: usize) -> Result<Var> {
        g.slice_rows(self.layers[layer].queries[group], self.num_learnable, self.size() - self.num_learnable)
    }

    /// Decoded predictions for rows `[start, start + len)` of one group.
    pub fn predictions(&self, g: &Graph, layer: usize, group: usize, start: usize, len: usize) -> Vec<Prediction> {
        let h = &self.layers[layer].heads[group];
        let (logits, center, lrtb, dims, orient, depth) = (
            g.value(h.logits),
            g.value(h.center),
            g.value(h.lrtb),
            g.value(h.dims),
            g.value(h.orient),
            g.value(h.depth),
        );
        (start..start + len)
            .map(|r| Prediction {
                class_probs: logits.row(r).iter().map(|&x| crate::numerics::graph::sigmoid(x)).collect(),
                center: center.row(r).try_into().unwrap(),
                lrtb: lrtb.row(r).try_into().unwrap(),
                dims: dims.row(r).try_into().unwrap(),
                orient: orient.row(r).try_into().unwrap(),
                depth: depth.at(r, 0),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn register(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.insert_glorot(&format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    fn apply(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register(store: &mut ParameterStore, name: &str, width: usize) -> Self {
        let gain = store.insert(&format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let bias = store.insert(&format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    fn apply(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Affine,
    down: Affine,
}

impl FeedForward {
    fn register(store: &mut ParameterStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Affine::register(store, &format!("{name}.up"), width, 2 * width, rng),
            down: Affine::register(store, &format!("{name}.down"), 2 * width, width, rng),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.up.apply(g, store, x)?;
        let h = g.relu(h);
        self.down.apply(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayerParams {
    self_norm: Norm,
    self_attn: AttentionParams,
    cross_norm: Norm,
    cross_attn: AttentionParams,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct QueryGroupParams {
    content: ParamId,
    /// `N x 6`: centre logits then pre-softplus edge distances.
    reference: ParamId,
}

/// Number of regression outputs per query: centre delta (2), edge delta (4),
/// size (3), yaw sin/cos (2), log-depth (1).
const BOX_OUTPUTS: usize = 12;
const DEPTH_SCALE: f64 = 20.0;
const LOG_DEPTH_LIMIT: f64 = 4.0;
const LOGIT_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
struct DetectorParams {
    input_proj: Affine,
    enc_attn_norm: Norm,
    enc_attn: AttentionParams,
    enc_ffn_norm: Norm,
    enc_ffn: FeedForward,
    groups: Vec<QueryGroupParams>,
    anchor_embed: (Affine, Affine),
    layers: Vec<DecoderLayerParams>,
    head_norm: Norm,
    class_head: Affine,
    box_hidden: Affine,
    box_out: Affine,
    generator: GeneratorParams,
    refiner: RefinerParams,
}

/// Training-time choices made from detached values during a forward pass.
/// Replaying them keeps the objective fixed while parameters are perturbed,
/// which is what a finite-difference check of the stop-gradient loss needs.
#[derive(Clone, Debug)]
pub struct FrozenDecisions {
    /// `[layer][group]` Hungarian assignments.
    pub assignments: Vec<Vec<Assignment>>,
    pub distill_targets: Vec<DistillTarget>,
    /// Final-layer output queries per group.
    pub teachers: Vec<Tensor>,
}

/// Loss terms of one scene (scalar vars) plus diagnostics.
pub struct TrainingStep {
    pub overall: Var,
    pub det: Var,
    pub dn: Var,
    pub reconstruction: Var,
    pub kl: Option<Var>,
    pub distill: Var,
    pub det_components: ComponentValues,
    /// Last-layer self-attention map per group.
    pub attn_maps: Vec<Tensor>,
    pub mask: AttentionMask,
    pub decisions: FrozenDecisions,
    pub trace: DecoderTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    pub box3d: OrientedBox3D,
    pub box2d: CornerBox,
    pub prediction: Prediction,
}

/// Parameter layout and forward computations of the detector. Weights live
/// in a separate [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    params: DetectorParams,
}

fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

fn inverse_softplus(y: f64) -> f64 {
    let y = y.max(LOGIT_EPS);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Reference row of a noisy query: centre logits and pre-softplus edges.
pub fn anchor_reference(a: &AnchorBox6D) -> [f64; 6] {
    [
        inverse_sigmoid(a.xc),
        inverse_sigmoid(a.yc),
        inverse_softplus(a.l),
        inverse_softplus(a.r),
        inverse_softplus(a.t),
        inverse_softplus(a.b),
    ]
}

/// Fixed 2D sine/cosine encoding of an `F x F` grid, `F^2 x width`.
pub fn grid_positional_encoding(grid: usize, width: usize) -> Tensor {
    let quarter = width / 4;
    let mut data = Vec::with_capacity(grid * grid * width);
    for i in 0..grid {
        for j in 0..grid {
            for (pos, _) in [(j, 0), (i, 1)] {
                for f in 0..quarter {
                    let freq = 1.0 / 100f64.powf(f as f64 / quarter.max(1) as f64);
                    let angle = pos as f64 * freq;
                    data.push(angle.sin());
                    data.push(angle.cos());
                }
            }
        }
    }
    Tensor::matrix(grid * grid, width, data).expect("encoding shape")
}

impl Detector {
    /// Registers every parameter (including the training-only generator and
    /// refiner) so that checkpoints have the same layout in every mode.
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        let d = cfg.width;
        let s = &mut store;
        let input_proj = Affine::register(s, "enc.input", cfg.input_channels, d, &mut rng);
        let enc_attn_norm = Norm::register(s, "enc.attn_norm", d);
        let enc_attn = AttentionParams::register(s, "enc.attn", d, &mut rng);
        let enc_ffn_norm = Norm::register(s, "enc.ffn_norm", d);
        let enc_ffn = FeedForward::register(s, "enc.ffn", d, &mut rng);
        let groups = (0..cfg.groups)
            .map(|i| {
                let content = s.insert_normal(&format!("query.{i}.content"), &[cfg.queries_per_group, d], 0.02, &mut rng);
                let mut refs = Vec::with_capacity(cfg.queries_per_group * 6);
                for _ in 0..cfg.queries_per_group {
                    use rand::Rng;
                    refs.push(rng.random_range(-1.5..1.5));
                    refs.push(rng.random_range(-1.5..1.5));
                    refs.extend([inverse_softplus(0.05); 4]);
                }
                let reference = s.insert(
                    &format!("query.{i}.reference"),
                    Tensor::matrix(cfg.queries_per_group, 6, refs).expect("reference shape"),
                );
                QueryGroupParams { content, reference }
            })
            .collect();
        let anchor_embed = (
            Affine::register(s, "anchor_embed.0", 6, d, &mut rng),
            Affine::register(s, "anchor_embed.1", d, d, &mut rng),
        );
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayerParams {
                self_norm: Norm::register(s, &format!("dec.{l}.self_norm"), d),
                self_attn: AttentionParams::register(s, &format!("dec.{l}.self_attn"), d, &mut rng),
                cross_norm: Norm::register(s, &format!("dec.{l}.cross_norm"), d),
                cross_attn: AttentionParams::register(s, &format!("dec.{l}.cross_attn"), d, &mut rng),
                ffn_norm: Norm::register(s, &format!("dec.{l}.ffn_norm"), d),
                ffn: FeedForward::register(s, &format!("dec.{l}.ffn"), d, &mut rng),
            })
            .collect();
        let head_norm = Norm::register(s, "head.norm", d);
        let class_head = Affine::register(s, "head.class", d, cfg.num_classes, &mut rng);
        // focal-loss prior: initial foreground probability 0.01
        s.value_mut(class_head.b).data_mut().fill(-(0.99f64 / 0.01).ln());
        let box_hidden = Affine::register(s, "head.box_hidden", d, d, &mut rng);
        let box_out = Affine::register(s, "head.box_out", d, BOX_OUTPUTS, &mut rng);
        {
            let bias = s.value_mut(box_out.b).data_mut();
            bias[6..9].copy_from_slice(&[inverse_softplus(3.0), inverse_softplus(1.6), inverse_softplus(1.6)]);
            bias[10] = 1.0;
        }
        let generator = GeneratorParams::register(s, d, cfg.num_classes, &mut rng);
        let refiner = RefinerParams::register(s, d, &mut rng);
        let params = DetectorParams {
            input_proj,
            enc_attn_norm,
            enc_attn,
            enc_ffn_norm,
            enc_ffn,
            groups,
            anchor_embed,
            layers,
            head_norm,
            class_head,
            box_hidden,
            box_out,
            generator,
            refiner,
        };
        Ok((Self { cfg, params }, store))
    }

    pub fn generator(&self) -> &GeneratorParams {
        &self.params.generator
    }

    pub fn refiner(&self) -> &RefinerParams {
        &self.params.refiner
    }

    /// Projects the `F x F x C_in` grid to width `D`, adds the positional
    /// encoding and runs one pre-norm self-attention encoder layer.
    pub fn encode_features(&self, g: &mut Graph, store: &ParameterStore, grid: &Tensor) -> Result<Var> {
        let f = self.cfg.grid_size;
        let expected = [f, f, self.cfg.input_channels];
        if grid.shape() != expected {
            return Err(VqdError::Dimension(format!("feature grid {:?}, expected {expected:?}", grid.shape())));
        }
        let p = &self.params;
        let flat = g.constant(grid.reshape(&[f * f, self.cfg.input_channels])?);
        let x = p.input_proj.apply(g, store, flat)?;
        let pos = g.constant(grid_positional_encoding(f, self.cfg.width));
        let x = g.add(x, pos)?;
        let n = p.enc_attn_norm.apply(g, store, x)?;
        let a = multihead_attention(g, store, &p.enc_attn, n, n, n, self.cfg.heads, None)?;
        let x = g.add(x, a.output)?;
        let n = p.enc_ffn_norm.apply(g, store, x)?;
        let ff = p.enc_ffn.apply(g, store, n)?;
        g.add(x, ff)
    }

    fn anchor_embedding(&self, g: &mut Graph, store: &ParameterStore, reference: Var) -> Result<Var> {
        let centers = g.slice_cols(reference, 0, 2)?;
        let centers = g.sigmoid(centers);
        let edges = g.slice_cols(reference, 2, 4)?;
        let edges = g.softplus(edges);
        let anchor = g.concat_cols(&[centers, edges])?;
        let h = self.params.anchor_embed.0.apply(g, store, anchor)?;
        let h = g.relu(h);
        self.params.anchor_embed.1.apply(g, store, h)
    }

    fn heads(&self, g: &mut Graph, store: &ParameterStore, queries: Var, reference: Var) -> Result<HeadOutputs> {
        let p = &self.params;
        let x = p.head_norm.apply(g, store, queries)?;
        let logits = p.class_head.apply(g, store, x)?;
        let h = p.box_hidden.apply(g, store, x)?;
        let h = g.relu(h);
        let raw = p.box_out.apply(g, store, h)?;

        let ref_center = g.slice_cols(reference, 0, 2)?;
        let d_center = g.slice_cols(raw, 0, 2)?;
        let center = g.add(ref_center, d_center)?;
        let center = g.sigmoid(center);

        let ref_edges = g.slice_cols(reference, 2, 4)?;
        let d_edges = g.slice_cols(raw, 2, 4)?;
        let lrtb = g.add(ref_edges, d_edges)?;
        let lrtb = g.softplus(lrtb);

        let dims = g.slice_cols(raw, 6, 3)?;
        let dims = g.softplus(dims);
        let orient = g.slice_cols(raw, 9, 2)?;
        let log_depth = g.slice_cols(raw, 11, 1)?;
        let log_depth = g.clamp(log_depth, -LOG_DEPTH_LIMIT, LOG_DEPTH_LIMIT);
        let depth = g.exp(log_depth);
        let depth = g.scale(depth, DEPTH_SCALE);
        Ok(HeadOutputs { logits, center, lrtb, dims, orient, depth })
    }

    /// Runs every decoder layer over every group: masked separated
    /// self-attention, unmasked cross-attention to `memory`, feed-forward.
    /// `references` holds one `S x 6` reference matrix per group.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        memory: Var,
        queries: &GroupQuerySet,
        references: &[Var],
        mask: &AttentionMask,
    ) -> Result<DecoderTrace> {
        queries.validate(g)?;
        if references.len() != queries.groups.len() {
            return Err(VqdError::CountMismatch(format!(
                "{} reference sets for {} groups",
                references.len(),
                queries.groups.len()
            )));
        }
        let heads = self.cfg.heads;
        let pos: Vec<Var> = references.iter().map(|&r| self.anchor_embedding(g, store, r)).collect::<Result<_>>()?;
        let mut hidden = queries.groups.clone();
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for lp in &self.params.layers {
            let mut attn_inputs = Vec::with_capacity(hidden.len());
            for (i, &h) in hidden.iter().enumerate() {
                let n = lp.self_norm.apply(g, store, h)?;
                attn_inputs.push(g.add(n, pos[i])?);
            }
            let set = GroupQuerySet { groups: attn_inputs, ..queries.clone() };
            let self_out = separated_group_attention(g, store, &set, mask, &lp.self_attn, heads)?;
            let mut out_queries = Vec::with_capacity(hidden.len());
            let mut out_heads = Vec::with_capacity(hidden.len());
            let mut maps = Vec::with_capacity(hidden.len());
            for (i, (h, sa)) in hidden.iter().zip(self_out).enumerate() {
                let h = g.add(*h, sa.output)?;
                let n = lp.cross_norm.apply(g, store, h)?;
                let q = g.add(n, pos[i])?;
                let ca = multihead_attention(g, store, &lp.cross_attn, q, memory, memory, heads, None)?;
                let h = g.add(h, ca.output)?;
                let n = lp.ffn_norm.apply(g, store, h)?;
                let ff = lp.ffn.apply(g, store, n)?;
                let h = g.add(h, ff)?;
                out_heads.push(self.heads(g, store, h, references[i])?);
                out_queries.push(h);
                maps.push(sa.attn_map);
            }
            hidden = out_queries.clone();
            layers.push(LayerRecord { queries: out_queries, heads: out_heads, attn_maps: maps });
        }
        Ok(DecoderTrace {
            layers,
            num_learnable: queries.num_learnable,
            num_objects: queries.num_objects,
            num_noisy_groups: queries.num_noisy_groups,
        })
    }

    fn learnable_group(&self, g: &mut Graph, store: &ParameterStore, group: usize) -> (Var, Var) {
        let gp = self.params.groups[group];
        (g.param(store, gp.content), g.param(store, gp.reference))
    }

    /// Loss of one scene under the current configuration. `beta` is the
    /// KL weight in effect; `rng` drives box noise and latent sampling.
    pub fn training_forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &Scene,
        beta: f64,
        rng: &mut ChaCha8Rng,
        frozen: Option<&FrozenDecisions>,
    ) -> Result<TrainingStep> {
        let cfg = &self.cfg;
        let gts = &scene.objects;
        let k = gts.len();
        let c = if k == 0 { 0 } else { cfg.noisy_groups };
        let n = cfg.queries_per_group;
        let memory = self.encode_features(g, store, &scene.grid)?;
        let mask = build_denoising_mask(n, k, c);

        let mut group_queries = Vec::with_capacity(cfg.groups);
        let mut references = Vec::with_capacity(cfg.groups);
        let mut dists: Vec<LatentDistribution> = Vec::new();
        for group in 0..cfg.groups {
            let (content, reference) = self.learnable_group(g, store, group);
            if c == 0 {
                group_queries.push(content);
                references.push(reference);
                continue;
            }
            let mut noisy = Vec::with_capacity(c * k);
            let mut refs = Vec::with_capacity(c * k * 6);
            for _ in 0..c {
                for gt in gts {
                    let (anchor, n3) = apply_box_noise(gt, &cfg.noise, cfg.num_classes, rng);
                    refs.extend(anchor_reference(&anchor));
                    noisy.push(n3);
                }
            }
            let dist = vqd::encode_noisy_boxes(g, store, &self.params.generator, &noisy)?;
            let z = vqd::sample_reparameterized(g, &dist, cfg.denoising.mode, rng)?;
            dists.push(dist);
            let blocks: Vec<Var> = (0..c).map(|j| g.slice_rows(z, j * k, k)).collect::<Result<_>>()?;
            group_queries.push(concat_group_queries(g, content, &blocks)?);
            let noisy_refs = g.constant(Tensor::matrix(c * k, 6, refs)?);
            references.push(g.concat_rows(&[reference, noisy_refs])?);
        }
        let set = GroupQuerySet {
            groups: group_queries,
            num_learnable: n,
            num_objects: k,
            num_noisy_groups: c,
            width: cfg.width,
        };
        let trace = self.decoder_forward(g, store, memory, &set, &references, &mask)?;
        let last = trace.num_layers() - 1;
        let focal = FocalParams::default();

        // detection loss with deep supervision
        let assignments: Vec<Vec<Assignment>> = match frozen {
            Some(f) => f.assignments.clone(),
            None => (0..trace.num_layers())
                .map(|l| {
                    let preds: Vec<Vec<Prediction>> =
                        (0..cfg.groups).map(|gi| trace.predictions(g, l, gi, 0, n)).collect();
                    groupwise_match(&preds, gts, &cfg.matcher)
                })
                .collect(),
        };
        let normalizer = k.max(1) as f64;
        let mut det_terms = Vec::new();
        let mut det_components = ComponentValues::default();
        for (l, layer_assign) in assignments.iter().enumerate() {
            for (gi, a) in layer_assign.iter().enumerate() {
                let matches: Vec<(usize, GroundTruthObject)> = a.pairs.iter().map(|&(q, t)| (q, gts[t])).collect();
                let heads = trace.layers[l].heads[gi];
                let sl = set_prediction_loss(g, &heads, 0..n, &matches, normalizer, &cfg.components, focal)?;
                if l == last && gi == 0 {
                    det_components = sl.values;
                }
                det_terms.push(sl.total);
            }
        }
        let det = sum_vars(g, &det_terms)?;

        // denoising reconstruction: every noisy row targets its source object
        let (dn, reconstruction, kl) = if c > 0 {
            let matches: Vec<(usize, GroundTruthObject)> =
                (0..c * k).map(|row| (n + row, gts[row % k])).collect();
            let mut per_layer = Vec::with_capacity(trace.num_layers());
            for layer in &trace.layers {
                let mut per_group = Vec::with_capacity(cfg.groups);
                for heads in &layer.heads {
                    let sl = set_prediction_loss(
                        g,
                        heads,
                        n..n + c * k,
                        &matches,
                        (c * k) as f64,
                        &cfg.components,
                        focal,
                    )?;
                    per_group.push(sl.total);
                }
                let s = sum_vars(g, &per_group)?;
                per_layer.push(g.scale(s, 1.0 / cfg.groups as f64));
            }
            let res = sum_vars(g, &per_layer)?;
            let terms = vqd::denoising_loss(g, res, &dists, cfg.denoising.mode, beta)?;
            (terms.total, terms.reconstruction, terms.kl)
        } else {
            let z = g.constant(Tensor::scalar(0.0));
            (z, z, None)
        };

        // forward-looking distillation
        let (distill_targets, teachers) = match frozen {
            Some(f) => (f.distill_targets.clone(), f.teachers.clone()),
            None => {
                let mut targets = Vec::new();
                for (gi, assignment) in assignments[last].iter().enumerate() {
                    let learn = trace.predictions(g, last, gi, 0, n);
                    targets.extend(distill::learnable_targets(gi, &learn, assignment, gts, &scene.intrinsics));
                    if c > 0 {
                        let noisy = trace.predictions(g, last, gi, n, c * k);
                        targets.extend(distill::noisy_targets(gi, n, k, &noisy, gts, &scene.intrinsics));
                    }
                }
                let teachers = trace.layers[last].queries.iter().map(|&q| g.value(q).clone()).collect();
                (targets, teachers)
            }
        };
        let distill_loss = if cfg.loss_weights.distill > 0.0 {
            let students: Vec<Vec<Var>> = trace.layers[..last].iter().map(|l| l.queries.clone()).collect();
            distill::forward_looking_distill(g, store, &students, &teachers, &distill_targets, Some(&self.params.refiner))?
        } else {
            g.constant(Tensor::scalar(0.0))
        };

        let lw = cfg.loss_weights;
        let a = g.scale(det, lw.det);
        let b = g.scale(dn, lw.dn);
        let d = g.scale(distill_loss, lw.distill);
        let ab = g.add(a, b)?;
        let overall = g.add(ab, d)?;
        let attn_maps = trace.layers[last].attn_maps.clone();
        Ok(TrainingStep {
            overall,
            det,
            dn,
            reconstruction,
            kl,
            distill: distill_loss,
            det_components,
            attn_maps,
            mask,
            decisions: FrozenDecisions { assignments, distill_targets, teachers },
            trace,
        })
    }

    /// Last-layer predictions of the first learnable group with no noisy
    /// queries. Depends only on the weights and the scene.
    pub fn predict(&self, store: &ParameterStore, scene: &Scene) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let memory = self.encode_features(&mut g, store, &scene.grid)?;
        let n = self.cfg.queries_per_group;
        let (content, reference) = self.learnable_group(&mut g, store, 0);
        let mask = build_denoising_mask(n, 0, 0);
        let set = GroupQuerySet {
            groups: vec![content],
            num_learnable: n,
            num_objects: 0,
            num_noisy_groups: 0,
            width: self.cfg.width,
        };
        let trace = self.decoder_forward(&mut g, store, memory, &set, &[reference], &mask)?;
        Ok(trace.predictions(&g, trace.num_layers() - 1, 0, 0, n))
    }

    /// Thresholded detections, no suppression step.
    pub fn inference(&self, store: &ParameterStore, scene: &Scene) -> Result<Vec<Detection>> {
        let preds = self.predict(store, scene)?;
        Ok(preds
            .into_iter()
            .filter_map(|p| {
                let (category, score) = p.top_class();
                (score >= self.cfg.confidence_threshold).then(|| Detection {
                    category,
                    score,
                    box3d: p.to_box3d(&scene.intrinsics),
                    box2d: crate::geometry::box2d_corners(&p.anchor()),
                    prediction: p,
                })
            })
            .collect())
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    match vars {
        [] => Ok(g.constant(Tensor::scalar(0.0))),
        [v] => Ok(*v),
        _ => {
            let stacked = g.concat_rows(vars)?;
            Ok(g.sum(stacked))
        }
    }
}
