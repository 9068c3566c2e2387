//! Parametric factor-to-variable message estimators.
//!
//! A message `beta_{F->p}` is produced directly by a small network instead of
//! being computed from a potential table:
//!
//! * a fully convolutional trunk maps the image to one feature vector of
//!   width `r` per grid node;
//! * for the edge `(p, F)` the node-factor feature is `[f(p); mean_{q in N_F\p} f(q)]`
//!   (the second half is zero for unary factors);
//! * on rounds after the first, the dependent-message feature `d_pF` (sum over
//!   `q` of the previous round's normalized variable-to-factor messages) is
//!   appended;
//! * a two-layer head per factor type maps that vector to `K` log-message
//!   entries, whatever the factor order.
//!
//! Heads are either shared by all rounds (input width `2r + K`, zero
//! dependent part on round one) or one block per round (`2r` on round one,
//! `2r + K` afterwards).
//!
//! Gradients are reverse-mode and hand-derived for this fixed architecture;
//! [`ForwardRecord`] keeps every intermediate the backward pass needs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::{FactorGraph, FactorType, GraphError};
use crate::image::Image;
use crate::message_passing::MessageSet;
use crate::numerics::{dot, log_softmax_in_place, logsumexp};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("image is {got_h}x{got_w}x{got_c}, expected {exp_h}x{exp_w}x{exp_c}")]
    ImageShape {
        exp_h: usize,
        exp_w: usize,
        exp_c: usize,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },
    #[error("graph has {graph} variables but the image has {image} pixels")]
    GraphImageMismatch { graph: usize, image: usize },
    #[error("graph has {graph} classes but the estimator outputs {estimator}")]
    ClassMismatch { graph: usize, estimator: usize },
    #[error("no estimator head for factor type `{0}`")]
    MissingHead(FactorType),
    #[error("input width {got} does not match head width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("round {round} outside 1..={rounds}")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("backward called before any forward pass was recorded")]
    NoForwardRecorded,
    #[error("gradient has {got} entries, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape of the estimator network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output width of each convolution block; the last one is `r`.
    pub trunk_widths: Vec<usize>,
    /// Odd square kernel size of the trunk convolutions.
    pub kernel_size: usize,
    pub head_hidden: usize,
    /// One head per type, in this order.
    pub factor_types: Vec<FactorType>,
    /// Inference rounds `T`.
    pub rounds: usize,
    /// One head block for all rounds instead of one per round.
    pub shared: bool,
}

impl Architecture {
    /// Three 3x3 blocks of width 16 and a 16-unit hidden layer.
    pub fn toy(in_channels: usize, num_classes: usize, factor_types: Vec<FactorType>) -> Self {
        Architecture {
            in_channels,
            num_classes,
            trunk_widths: vec![16, 16, 16],
            kernel_size: 3,
            head_hidden: 16,
            factor_types,
            rounds: 1,
            shared: false,
        }
    }

    /// Feature dimension `r`.
    pub fn feature_dim(&self) -> usize {
        self.trunk_widths.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidArchitecture(m.to_owned()));
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.trunk_widths.contains(&0) || self.head_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.factor_types.is_empty() {
            return bad("at least one factor type is required");
        }
        Ok(())
    }

    fn head_blocks_per_type(&self) -> usize {
        if self.shared {
            1
        } else {
            self.rounds
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayout {
    weight: usize,
    bias: usize,
    in_ch: usize,
    out_ch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeadLayout {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    in_width: usize,
    has_dep: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    trunk: Vec<ConvLayout>,
    /// `heads[type_index * blocks_per_type + block]`.
    heads: Vec<HeadLayout>,
}

fn build_layout(arch: &Architecture) -> (Vec<ParamBlock>, Layout) {
    let mut blocks: Vec<ParamBlock> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        let offset = blocks.last().map(|b| b.offset + b.len()).unwrap_or(0);
        blocks.push(ParamBlock { name, shape, offset });
        blocks.len() - 1
    };
    let ks = arch.kernel_size;
    let mut trunk = Vec::new();
    let mut in_ch = arch.in_channels;
    for (i, &out_ch) in arch.trunk_widths.iter().enumerate() {
        let weight = push(format!("trunk.conv{i}.weight"), vec![out_ch, in_ch, ks, ks]);
        let bias = push(format!("trunk.conv{i}.bias"), vec![out_ch]);
        trunk.push(ConvLayout { weight, bias, in_ch, out_ch });
        in_ch = out_ch;
    }
    let r = arch.feature_dim();
    let (k, hid) = (arch.num_classes, arch.head_hidden);
    let mut heads = Vec::new();
    for tag in &arch.factor_types {
        for block in 0..arch.head_blocks_per_type() {
            let has_dep = arch.shared || block > 0;
            let in_width = 2 * r + if has_dep { k } else { 0 };
            let prefix = if arch.shared {
                format!("head.{tag}")
            } else {
                format!("head.{tag}.round{}", block + 1)
            };
            let fc1_w = push(format!("{prefix}.fc1.weight"), vec![hid, in_width]);
            let fc1_b = push(format!("{prefix}.fc1.bias"), vec![hid]);
            let fc2_w = push(format!("{prefix}.fc2.weight"), vec![k, hid]);
            let fc2_b = push(format!("{prefix}.fc2.bias"), vec![k]);
            heads.push(HeadLayout { fc1_w, fc1_b, fc2_w, fc2_b, in_width, has_dep });
        }
    }
    (blocks, Layout { trunk, heads })
}

/// Trainable parameters `theta`: trunk convolutions plus the head blocks,
/// stored as one flat vector with named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    arch: Architecture,
    blocks: Vec<ParamBlock>,
    layout: Layout,
    values: Vec<f64>,
}

impl EstimatorParams {
    pub fn zeros(arch: Architecture) -> Result<Self, EstimatorError> {
        arch.validate()?;
        let (blocks, layout) = build_layout(&arch);
        let total = blocks.last().map(|b| b.offset + b.len()).unwrap_or(0);
        Ok(EstimatorParams { arch, blocks, layout, values: vec![0.0; total] })
    }

    /// Weights drawn from `U(-a, a)` with `a = sqrt(3 / fan_in)` (unit
    /// variance per output for unit-variance inputs); biases start at zero.
    /// Head output layers start at zero: a belief sums one message per
    /// adjacent factor, and random outputs would start training from
    /// arbitrarily confident, mostly wrong beliefs.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, EstimatorError> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &params.blocks {
            if block.shape.len() < 2 || block.name.ends_with(".fc2.weight") {
                continue;
            }
            let fan_in: usize = block.shape[1..].iter().product();
            let bound = (3.0 / fan_in as f64).sqrt();
            for v in &mut params.values[block.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.blocks.iter().find(|b| b.name == name)?.range();
        Some(&mut self.values[range])
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn slice(&self, block: usize) -> &[f64] {
        &self.values[self.blocks[block].range()]
    }

    fn type_index(&self, tag: &FactorType) -> Result<usize, EstimatorError> {
        self.arch
            .factor_types
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| EstimatorError::MissingHead(tag.clone()))
    }

    fn head_index(&self, type_index: usize, round: usize) -> usize {
        let per = self.arch.head_blocks_per_type();
        type_index * per + if self.arch.shared { 0 } else { round - 1 }
    }

    /// Block names used by the head of `tag` on `round` (1-based).
    pub fn head_block_names(&self, tag: &FactorType, round: usize) -> Result<Vec<String>, EstimatorError> {
        self.check_round(round)?;
        let h = self.layout.heads[self.head_index(self.type_index(tag)?, round)];
        Ok([h.fc1_w, h.fc1_b, h.fc2_w, h.fc2_b]
            .iter()
            .map(|&b| self.blocks[b].name.clone())
            .collect())
    }

    fn check_round(&self, round: usize) -> Result<(), EstimatorError> {
        if round == 0 || round > self.arch.rounds {
            return Err(EstimatorError::RoundOutOfRange { round, rounds: self.arch.rounds });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_FORMAT_VERSION,
            architecture: self.arch.clone(),
            blocks: self.blocks.clone(),
            values: self.values.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, EstimatorError> {
        if ckpt.version != CHECKPOINT_FORMAT_VERSION {
            return Err(EstimatorError::Version(ckpt.version));
        }
        let mut params = Self::zeros(ckpt.architecture)?;
        let names: Vec<(&str, &[usize])> =
            params.blocks.iter().map(|b| (b.name.as_str(), b.shape.as_slice())).collect();
        let stored: Vec<(&str, &[usize])> =
            ckpt.blocks.iter().map(|b| (b.name.as_str(), b.shape.as_slice())).collect();
        if names != stored {
            return Err(EstimatorError::CheckpointMismatch(
                "block list does not match the declared architecture".into(),
            ));
        }
        if ckpt.values.len() != params.values.len() {
            return Err(EstimatorError::CheckpointMismatch(format!(
                "{} values for {} parameters",
                ckpt.values.len(),
                params.values.len()
            )));
        }
        params.values = ckpt.values;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), EstimatorError> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EstimatorError> {
        Self::from_checkpoint(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Loads a checkpoint and rejects it unless it has `num_classes` outputs
    /// and feature dimension `feature_dim`.
    pub fn load_expecting(path: &Path, num_classes: usize, feature_dim: usize) -> Result<Self, EstimatorError> {
        let params = Self::load(path)?;
        if params.arch.num_classes != num_classes {
            return Err(EstimatorError::CheckpointMismatch(format!(
                "checkpoint has K = {}, expected {num_classes}",
                params.arch.num_classes
            )));
        }
        if params.arch.feature_dim() != feature_dim {
            return Err(EstimatorError::CheckpointMismatch(format!(
                "checkpoint has r = {}, expected {feature_dim}",
                params.arch.feature_dim()
            )));
        }
        Ok(params)
    }
}

/// Parameter checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub blocks: Vec<ParamBlock>,
    pub values: Vec<f64>,
}

/// Per-node trunk features, `num_nodes x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn node(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

fn check_image(arch: &Architecture, image: &Image) -> Result<(), EstimatorError> {
    if image.channels != arch.in_channels || image.data.len() != image.num_pixels() * image.channels {
        return Err(EstimatorError::ImageShape {
            exp_h: image.height,
            exp_w: image.width,
            exp_c: arch.in_channels,
            got_h: image.height,
            got_w: image.width,
            got_c: image.channels,
        });
    }
    Ok(())
}

/// Same-padded convolution followed by `max(0, .)`, channel-major buffers.
#[allow(clippy::too_many_arguments)]
fn conv_relu_forward(
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    ks: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let n = h * w;
    let c = (ks / 2) as isize;
    let mut out = vec![0.0; out_ch * n];
    for o in 0..out_ch {
        let plane = &mut out[o * n..(o + 1) * n];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..ks {
                let dy = ky as isize - c;
                for kx in 0..ks {
                    let dx = kx as isize - c;
                    let wv = weight[((o * in_ch + i) * ks + ky) * ks + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst_row = &mut plane[y * w + x0..y * w + x1];
                        let src_off = (sy * w) as isize + dx;
                        let src_row = &src[(src_off + x0 as isize) as usize..(src_off + x1 as isize) as usize];
                        for (d, s) in dst_row.iter_mut().zip(src_row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        plane.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// Backward of [`conv_relu_forward`]. `grad_out` is w.r.t. the post-ReLU
/// output; accumulates into `grad_w`, `grad_b` and, when given, `grad_in`.
#[allow(clippy::too_many_arguments)]
fn conv_relu_backward(
    input: &[f64],
    output: &[f64],
    grad_out: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    ks: usize,
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let n = h * w;
    let c = (ks / 2) as isize;
    let mut dz = vec![0.0; n];
    for o in 0..out_ch {
        for (p, d) in dz.iter_mut().enumerate() {
            *d = if output[o * n + p] > 0.0 { grad_out[o * n + p] } else { 0.0 };
        }
        grad_b[o] += dz.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..ks {
                let dy = ky as isize - c;
                for kx in 0..ks {
                    let dx = kx as isize - c;
                    let widx = ((o * in_ch + i) * ks + ky) * ks + kx;
                    let wv = weight[widx];
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dz_row = &dz[y * w + x0..y * w + x1];
                        let s0 = ((sy * w) as isize + dx + x0 as isize) as usize;
                        let src_row = &src[s0..s0 + (x1 - x0)];
                        for (g, s) in dz_row.iter().zip(src_row) {
                            acc += g * s;
                        }
                        if let Some(gin) = grad_in.as_deref_mut() {
                            let gin_row = &mut gin[i * n + s0..i * n + s0 + (x1 - x0)];
                            for (gi, g) in gin_row.iter_mut().zip(dz_row) {
                                *gi += wv * g;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

fn trunk_forward(params: &EstimatorParams, image: &Image) -> (Vec<f64>, Vec<Vec<f64>>) {
    let input = image.to_chw();
    let (h, w, ks) = (image.height, image.width, params.arch.kernel_size);
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(params.layout.trunk.len());
    for layer in &params.layout.trunk {
        let prev = acts.last().unwrap_or(&input);
        let out = conv_relu_forward(
            prev,
            layer.in_ch,
            layer.out_ch,
            h,
            w,
            ks,
            params.slice(layer.weight),
            params.slice(layer.bias),
        );
        acts.push(out);
    }
    (input, acts)
}

fn features_from_chw(chw: &[f64], dim: usize, h: usize, w: usize) -> FeatureMap {
    let n = h * w;
    let mut data = vec![0.0; n * dim];
    for c in 0..dim {
        for p in 0..n {
            data[p * dim + c] = chw[c * n + p];
        }
    }
    FeatureMap { height: h, width: w, dim, data }
}

/// Trunk forward pass: one `r`-vector per pixel.
pub fn extract_features(params: &EstimatorParams, image: &Image) -> Result<FeatureMap, EstimatorError> {
    check_image(&params.arch, image)?;
    let (input, acts) = trunk_forward(params, image);
    let last = acts.last().unwrap_or(&input);
    Ok(features_from_chw(last, params.arch.feature_dim(), image.height, image.width))
}

/// `[f(p); mean of f over N_F \ p]`, zero second half when the complement is empty.
pub fn node_factor_feature(
    features: &FeatureMap,
    graph: &FactorGraph,
    p: usize,
    factor: usize,
) -> Result<Vec<f64>, EstimatorError> {
    let comp = graph.neighbor_complement(factor, p)?;
    let r = features.dim;
    let mut out = vec![0.0; 2 * r];
    out[..r].copy_from_slice(features.node(p));
    if !comp.is_empty() {
        for &q in &comp {
            for (o, v) in out[r..].iter_mut().zip(features.node(q)) {
                *o += v;
            }
        }
        let inv = 1.0 / comp.len() as f64;
        out[r..].iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// `d_pF(y) = sum_{q in N_F\p} log_softmax_y( sum_{F' in F_q \ F} beta_{F'->q}(y) )`
/// from the previous round's factor-to-variable messages.
pub fn dependent_feature(
    prev: &MessageSet,
    graph: &FactorGraph,
    p: usize,
    factor: usize,
) -> Result<Vec<f64>, EstimatorError> {
    let k = graph.num_classes();
    let comp = graph.neighbor_complement(factor, p)?;
    let mut d = vec![0.0; k];
    let mut u = vec![0.0; k];
    for q in comp {
        u.iter_mut().for_each(|v| *v = 0.0);
        for (&f, &s) in graph.factors_of(q).iter().zip(graph.slots_of(q)) {
            if f == factor {
                continue;
            }
            for (a, b) in u.iter_mut().zip(prev.factor_to_var(s)) {
                *a += b;
            }
        }
        log_softmax_in_place(&mut u);
        for (a, b) in d.iter_mut().zip(&u) {
            *a += b;
        }
    }
    Ok(d)
}

/// Evaluates the head of `tag` for `round` on one node-factor feature. `dep`
/// must be given exactly when the head takes dependent features, except that
/// a shared head on round one is fed zeros when it is absent.
pub fn estimate_message(
    params: &EstimatorParams,
    tag: &FactorType,
    round: usize,
    z_feat: &[f64],
    dep: Option<&[f64]>,
) -> Result<Vec<f64>, EstimatorError> {
    params.check_round(round)?;
    let head = params.layout.heads[params.head_index(params.type_index(tag)?, round)];
    let (r, k, hid) = (params.arch.feature_dim(), params.arch.num_classes, params.arch.head_hidden);
    if z_feat.len() != 2 * r {
        return Err(EstimatorError::WidthMismatch { expected: 2 * r, got: z_feat.len() });
    }
    let mut input = z_feat.to_vec();
    match (head.has_dep, dep) {
        (true, Some(d)) => {
            if d.len() != k {
                return Err(EstimatorError::WidthMismatch { expected: head.in_width, got: 2 * r + d.len() });
            }
            input.extend_from_slice(d);
        }
        (true, None) if params.arch.shared && round == 1 => input.extend(std::iter::repeat_n(0.0, k)),
        (true, None) => {
            return Err(EstimatorError::WidthMismatch { expected: head.in_width, got: 2 * r });
        }
        (false, Some(d)) => {
            return Err(EstimatorError::WidthMismatch { expected: head.in_width, got: 2 * r + d.len() });
        }
        (false, None) => {}
    }
    let (w1, b1) = (params.slice(head.fc1_w), params.slice(head.fc1_b));
    let (w2, b2) = (params.slice(head.fc2_w), params.slice(head.fc2_b));
    let hidden: Vec<f64> = (0..hid)
        .map(|j| {
            let row = &w1[j * head.in_width..(j + 1) * head.in_width];
            let pre = b1[j] + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
            pre.max(0.0)
        })
        .collect();
    Ok((0..k)
        .map(|c| b2[c] + w2[c * hid..(c + 1) * hid].iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>())
        .collect())
}

/// Flattened per-slot bookkeeping for one graph.
#[derive(Debug, Clone)]
struct SlotPlan {
    /// Graph type position to estimator type index.
    type_map: Vec<usize>,
    slots: usize,
}

impl SlotPlan {
    fn new(params: &EstimatorParams, graph: &FactorGraph) -> Result<Self, EstimatorError> {
        let type_map = graph.factor_types().iter().map(|t| params.type_index(t)).collect::<Result<_, _>>()?;
        Ok(SlotPlan { type_map, slots: graph.num_slots() })
    }

    fn head_type(&self, graph: &FactorGraph, s: usize) -> usize {
        self.type_map[graph.slot_type_index(s)]
    }
}

/// First-layer head projections of every node's features: the node half
/// and the neighbour half of `fc1`, `num_nodes x hidden` each.
#[derive(Debug, Clone)]
struct Projection {
    node: Vec<f64>,
    neighbor: Vec<f64>,
}

/// Resolved parameter slices of one head block.
struct HeadView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    /// `fc2` weights transposed to `hid x k`.
    w2t: Vec<f64>,
    b2: &'a [f64],
    in_width: usize,
    has_dep: bool,
    proj: &'a Projection,
}

impl<'a> HeadView<'a> {
    fn new(params: &'a EstimatorParams, h: usize, proj: &'a Projection) -> Self {
        let head = params.layout.heads[h];
        let w2 = params.slice(head.fc2_w);
        let (k, hid) = (params.arch.num_classes, params.arch.head_hidden);
        let mut w2t = vec![0.0; hid * k];
        for c in 0..k {
            for j in 0..hid {
                w2t[j * k + c] = w2[c * hid + j];
            }
        }
        HeadView {
            w1: params.slice(head.fc1_w),
            b1: params.slice(head.fc1_b),
            w2t,
            b2: params.slice(head.fc2_b),
            in_width: head.in_width,
            has_dep: head.has_dep,
            proj,
        }
    }
}

/// ReLU hidden layer of the head evaluated on slot `s`.
fn slot_hidden(v: &HeadView, graph: &FactorGraph, s: usize, dep: Option<&Vec<f64>>, r: usize, k: usize, out: &mut [f64]) {
    let hid = out.len();
    let p = graph.slot_variable(s);
    for ((a, b), c) in out.iter_mut().zip(v.b1).zip(&v.proj.node[p * hid..(p + 1) * hid]) {
        *a = b + c;
    }
    let comp = graph.complement_variables(s);
    if let [q] = *comp {
        for (a, b) in out.iter_mut().zip(&v.proj.neighbor[q * hid..(q + 1) * hid]) {
            *a += b;
        }
    } else if !comp.is_empty() {
        let inv = 1.0 / comp.len() as f64;
        for &q in comp {
            for (a, b) in out.iter_mut().zip(&v.proj.neighbor[q * hid..(q + 1) * hid]) {
                *a += inv * b;
            }
        }
    }
    if let (true, Some(d)) = (v.has_dep, dep) {
        let ds = &d[s * k..(s + 1) * k];
        for (j, a) in out.iter_mut().enumerate() {
            *a += dot(&v.w1[j * v.in_width + 2 * r..(j + 1) * v.in_width], ds);
        }
    }
    out.iter_mut().for_each(|a| *a = a.max(0.0));
}

/// Head views of `round`, indexed like `params.layout.heads`.
fn head_views<'a>(params: &'a EstimatorParams, projections: &'a [Option<Projection>]) -> Vec<Option<HeadView<'a>>> {
    projections.iter().enumerate().map(|(h, proj)| proj.as_ref().map(|p| HeadView::new(params, h, p))).collect()
}

#[derive(Debug, Clone)]
struct RoundRecord {
    /// One bit per hidden unit and slot: was the ReLU active?
    active: Vec<u64>,
    dep: Option<Vec<f64>>,
    messages: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    height: usize,
    width: usize,
    input: Vec<f64>,
    activations: Vec<Vec<f64>>,
    features: FeatureMap,
    plan: SlotPlan,
    projections: Vec<Option<Projection>>,
    rounds: Vec<RoundRecord>,
    log_marginals: Vec<f64>,
    num_classes: usize,
    hidden_width: usize,
}

impl ForwardRecord {
    /// Row-wise log-softmax of the summed final-round messages.
    pub fn log_marginals(&self) -> &[f64] {
        &self.log_marginals
    }

    pub fn marginals(&self) -> crate::exact_oracle::Marginals {
        crate::exact_oracle::Marginals::new(
            self.num_classes,
            self.log_marginals.iter().map(|v| v.exp()).collect(),
        )
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Factor-to-variable messages of `round` (1-based), `slots x K`.
    pub fn round_messages(&self, round: usize) -> &[f64] {
        &self.rounds[round - 1].messages
    }

    /// Message set of `round` with the matching normalized
    /// variable-to-factor messages filled in.
    pub fn message_set(&self, graph: &FactorGraph, round: usize) -> MessageSet {
        MessageSet::from_factor_messages(graph, self.rounds[round - 1].messages.clone(), round)
    }

    /// Signature of every ReLU on/off decision; equal signatures mean the
    /// network is locally the same smooth function.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.activations.iter().flatten().map(|&v| v > 0.0).collect();
        for r in &self.rounds {
            out.extend((0..self.plan.slots * self.hidden_width).map(|i| r.active[i / 64] >> (i % 64) & 1 == 1));
        }
        out
    }
}

/// Runs `params.architecture().rounds` synchronous rounds of estimated
/// messages on `graph` and records the computation.
pub fn forward(params: &EstimatorParams, graph: &FactorGraph, image: &Image) -> Result<ForwardRecord, EstimatorError> {
    run_forward(params, graph, image, true)
}

/// Marginals only. Skips the record needed for gradients: the last round's
/// messages go straight into the belief sums, in the same order, so the
/// result is bitwise equal to `forward(..).marginals()`.
pub fn infer(params: &EstimatorParams, graph: &FactorGraph, image: &Image) -> Result<crate::exact_oracle::Marginals, EstimatorError> {
    Ok(run_forward(params, graph, image, false)?.marginals())
}

fn run_forward(params: &EstimatorParams, graph: &FactorGraph, image: &Image, tape: bool) -> Result<ForwardRecord, EstimatorError> {
    check_image(&params.arch, image)?;
    if graph.num_variables() != image.num_pixels() {
        return Err(EstimatorError::GraphImageMismatch {
            graph: graph.num_variables(),
            image: image.num_pixels(),
        });
    }
    if graph.num_classes() != params.arch.num_classes {
        return Err(EstimatorError::ClassMismatch {
            graph: graph.num_classes(),
            estimator: params.arch.num_classes,
        });
    }
    let plan = SlotPlan::new(params, graph)?;
    let (input, activations) = trunk_forward(params, image);
    let features = features_from_chw(
        activations.last().unwrap_or(&input),
        params.arch.feature_dim(),
        image.height,
        image.width,
    );

    let n = graph.num_variables();
    let k = params.arch.num_classes;
    let hid = params.arch.head_hidden;
    let r = features.dim;
    let rounds = params.arch.rounds;
    let slots = graph.num_slots();

    // Which head blocks are needed, and do they need the neighbour half?
    let mut used = vec![false; params.layout.heads.len()];
    let mut needs_neighbor = vec![false; params.layout.heads.len()];
    for round in 1..=rounds {
        for s in 0..slots {
            let h = params.head_index(plan.head_type(graph, s), round);
            used[h] = true;
            if !graph.complement_slots(s).is_empty() {
                needs_neighbor[h] = true;
            }
        }
    }
    let projections: Vec<Option<Projection>> = params
        .layout
        .heads
        .iter()
        .enumerate()
        .map(|(h, head)| {
            if !used[h] {
                return None;
            }
            let w1 = params.slice(head.fc1_w);
            // Transposed halves, `r x hid`, so each node is a sum of contiguous rows.
            let half = |off: usize| -> Vec<f64> {
                let mut t = vec![0.0; r * hid];
                for j in 0..hid {
                    for i in 0..r {
                        t[i * hid + j] = w1[j * head.in_width + off + i];
                    }
                }
                t
            };
            let project = |wt: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; n * hid];
                for (p, row) in out.chunks_exact_mut(hid).enumerate() {
                    for (i, &x) in features.node(p).iter().enumerate() {
                        for (o, w) in row.iter_mut().zip(&wt[i * hid..(i + 1) * hid]) {
                            *o += x * w;
                        }
                    }
                }
                out
            };
            let node = project(&half(0));
            let neighbor = if needs_neighbor[h] { project(&half(r)) } else { Vec::new() };
            Some(Projection { node, neighbor })
        })
        .collect();

    let mut records: Vec<RoundRecord> = Vec::with_capacity(rounds);
    // Belief sums, filled directly by the last round when no tape is kept.
    let mut sums = Vec::new();
    for round in 1..=rounds {
        let dep = match records.last() {
            Some(prev) if round > 1 => Some(dependent_features(graph, &plan, &prev.messages, k)),
            _ => None,
        };
        let stream = round == rounds && !tape;
        let mut active = vec![0u64; if stream { 0 } else { (slots * hid).div_ceil(64) }];
        let mut messages = vec![0.0; if stream { 0 } else { slots * k }];
        if stream {
            sums = vec![0.0; n * k];
        }
        let views = head_views(params, &projections);
        let mut hs = vec![0.0; hid];
        let mut buf = vec![0.0; k];
        for s in 0..slots {
            let v = views[params.head_index(plan.head_type(graph, s), round)].as_ref().expect("projection computed");
            slot_hidden(v, graph, s, dep.as_ref(), r, k, &mut hs);
            let out = if stream {
                &mut buf[..]
            } else {
                for (j, &h) in hs.iter().enumerate() {
                    let i = s * hid + j;
                    active[i / 64] |= u64::from(h > 0.0) << (i % 64);
                }
                &mut messages[s * k..(s + 1) * k]
            };
            out.copy_from_slice(v.b2);
            for (&h, wrow) in hs.iter().zip(v.w2t.chunks_exact(k)) {
                if h > 0.0 {
                    for (o, w) in out.iter_mut().zip(wrow) {
                        *o += h * w;
                    }
                }
            }
            if stream {
                let p = graph.slot_variable(s);
                for (a, b) in sums[p * k..(p + 1) * k].iter_mut().zip(&buf) {
                    *a += b;
                }
            }
        }
        records.push(RoundRecord { active, dep, messages });
    }

    let log_marginals = if tape {
        belief_log_marginals(graph, &records.last().expect("rounds >= 1").messages, k)
    } else {
        for row in sums.chunks_mut(k) {
            log_softmax_in_place(row);
        }
        sums
    };
    Ok(ForwardRecord {
        height: image.height,
        width: image.width,
        input,
        activations,
        features,
        plan,
        projections,
        rounds: records,
        log_marginals,
        num_classes: k,
        hidden_width: hid,
    })
}

/// Sum of all incoming messages per node.
fn incoming_sums(graph: &FactorGraph, messages: &[f64], k: usize) -> Vec<f64> {
    let n = graph.num_variables();
    let mut sums = vec![0.0; n * k];
    for q in 0..n {
        let row = &mut sums[q * k..(q + 1) * k];
        for &s in graph.slots_of(q) {
            for (a, b) in row.iter_mut().zip(&messages[s * k..(s + 1) * k]) {
                *a += b;
            }
        }
    }
    sums
}

fn dependent_features(graph: &FactorGraph, plan: &SlotPlan, prev: &[f64], k: usize) -> Vec<f64> {
    let sums = incoming_sums(graph, prev, k);
    let slots = plan.slots;
    let mut dep = vec![0.0; slots * k];
    let mut u = vec![0.0; k];
    for s in 0..slots {
        for (&q, &qs) in graph.complement_variables(s).iter().zip(graph.complement_slots(s)) {
            for c in 0..k {
                u[c] = sums[q * k + c] - prev[qs * k + c];
            }
            log_softmax_in_place(&mut u);
            for c in 0..k {
                dep[s * k + c] += u[c];
            }
        }
    }
    dep
}

fn belief_log_marginals(graph: &FactorGraph, messages: &[f64], k: usize) -> Vec<f64> {
    let mut out = incoming_sums(graph, messages, k);
    for row in out.chunks_mut(k) {
        log_softmax_in_place(row);
    }
    out
}

/// Reverse pass: gradient of a scalar loss with respect to every parameter,
/// given its gradient with respect to the recorded log-marginals.
pub fn backward(
    params: &EstimatorParams,
    graph: &FactorGraph,
    record: &ForwardRecord,
    grad_log_marginals: &[f64],
) -> Result<Vec<f64>, EstimatorError> {
    let k = params.arch.num_classes;
    let n = graph.num_variables();
    if grad_log_marginals.len() != n * k {
        return Err(EstimatorError::GradientShape { expected: n * k, got: grad_log_marginals.len() });
    }
    let hid = params.arch.head_hidden;
    let r = record.features.dim;
    let plan = &record.plan;
    let slots = plan.slots;
    let mut grad = vec![0.0; params.values.len()];

    // log-softmax backward: d logits = g - softmax * sum(g).
    let mut d_sum = vec![0.0; n * k];
    for p in 0..n {
        let g = &grad_log_marginals[p * k..(p + 1) * k];
        let lp = &record.log_marginals[p * k..(p + 1) * k];
        let total: f64 = g.iter().sum();
        for c in 0..k {
            d_sum[p * k + c] = g[c] - lp[c].exp() * total;
        }
    }
    let mut d_msg = vec![0.0; slots * k];
    for s in 0..slots {
        let p = graph.slot_variable(s);
        d_msg[s * k..(s + 1) * k].copy_from_slice(&d_sum[p * k..(p + 1) * k]);
    }

    let mut d_proj: Vec<Option<Projection>> = record
        .projections
        .iter()
        .map(|p| {
            p.as_ref().map(|p| Projection {
                node: vec![0.0; p.node.len()],
                neighbor: vec![0.0; p.neighbor.len()],
            })
        })
        .collect();

    let views = head_views(params, &record.projections);
    let mut hs = vec![0.0; hid];
    let mut dh = vec![0.0; hid];
    let mut dd = vec![0.0; k];
    let mut u = vec![0.0; k];
    for round in (1..=record.rounds.len()).rev() {
        let rec = &record.rounds[round - 1];
        let prev = if round > 1 { Some(&record.rounds[round - 2].messages) } else { None };
        let prev_sums = prev.map(|m| incoming_sums(graph, m, k));
        let mut d_prev = vec![0.0; if prev.is_some() { slots * k } else { 0 }];
        let mut d_prev_sums = vec![0.0; if prev.is_some() { n * k } else { 0 }];

        for s in 0..slots {
            let hidx = params.head_index(plan.head_type(graph, s), round);
            let head = params.layout.heads[hidx];
            let dz = &d_msg[s * k..(s + 1) * k];
            // Recomputed rather than stored: cheaper than keeping slots x hidden values.
            slot_hidden(views[hidx].as_ref().expect("projection recorded"), graph, s, rec.dep.as_ref(), r, k, &mut hs);
            let w2 = params.slice(head.fc2_w);
            let w2_off = params.blocks[head.fc2_w].offset;
            let b2_off = params.blocks[head.fc2_b].offset;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..k {
                let g = dz[c];
                if g == 0.0 {
                    continue;
                }
                grad[b2_off + c] += g;
                for j in 0..hid {
                    grad[w2_off + c * hid + j] += g * hs[j];
                    dh[j] += g * w2[c * hid + j];
                }
            }
            // ReLU gate: dh becomes d(pre-activation).
            for (d, &h) in dh.iter_mut().zip(&hs) {
                if h <= 0.0 {
                    *d = 0.0;
                }
            }
            let b1_off = params.blocks[head.fc1_b].offset;
            for j in 0..hid {
                grad[b1_off + j] += dh[j];
            }
            let p = graph.slot_variable(s);
            let dp = d_proj[hidx].as_mut().expect("projection recorded");
            for j in 0..hid {
                dp.node[p * hid + j] += dh[j];
            }
            let comp = graph.complement_variables(s);
            if !comp.is_empty() {
                let inv = 1.0 / comp.len() as f64;
                for &q in comp {
                    for j in 0..hid {
                        dp.neighbor[q * hid + j] += inv * dh[j];
                    }
                }
            }
            if let (true, Some(dep)) = (head.has_dep, rec.dep.as_ref()) {
                let w1 = params.slice(head.fc1_w);
                let w1_off = params.blocks[head.fc1_w].offset;
                let ds = &dep[s * k..(s + 1) * k];
                dd.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..hid {
                    let g = dh[j];
                    if g == 0.0 {
                        continue;
                    }
                    let base = j * head.in_width + 2 * r;
                    for c in 0..k {
                        grad[w1_off + base + c] += g * ds[c];
                        dd[c] += g * w1[base + c];
                    }
                }
                // Through d_pF = sum_q log_softmax(S_q - beta_{F->q}).
                let (prev, sums) = (prev.expect("dep implies round > 1"), prev_sums.as_ref().expect("sums"));
                let dd_total: f64 = dd.iter().sum();
                for (&q, &qs) in comp.iter().zip(graph.complement_slots(s)) {
                    for c in 0..k {
                        u[c] = sums[q * k + c] - prev[qs * k + c];
                    }
                    let lse = logsumexp(&u);
                    for c in 0..k {
                        let du = dd[c] - (u[c] - lse).exp() * dd_total;
                        d_prev_sums[q * k + c] += du;
                        d_prev[qs * k + c] -= du;
                    }
                }
            }
        }
        if prev.is_some() {
            for q in 0..n {
                for &s in graph.slots_of(q) {
                    for c in 0..k {
                        d_prev[s * k + c] += d_prev_sums[q * k + c];
                    }
                }
            }
            d_msg = d_prev;
        }
    }

    // Projections back to fc1 node/neighbour columns and to the features.
    let mut d_feat = vec![0.0; n * r];
    for (hidx, dp) in d_proj.iter().enumerate() {
        let Some(dp) = dp else { continue };
        let head = params.layout.heads[hidx];
        let w1 = params.slice(head.fc1_w);
        let w1_off = params.blocks[head.fc1_w].offset;
        for p in 0..n {
            let f = record.features.node(p);
            let df = &mut d_feat[p * r..(p + 1) * r];
            for j in 0..hid {
                let row = j * head.in_width;
                let g = dp.node[p * hid + j];
                if g != 0.0 {
                    for c in 0..r {
                        grad[w1_off + row + c] += g * f[c];
                        df[c] += g * w1[row + c];
                    }
                }
                if !dp.neighbor.is_empty() {
                    let g = dp.neighbor[p * hid + j];
                    if g != 0.0 {
                        for c in 0..r {
                            grad[w1_off + row + r + c] += g * f[c];
                            df[c] += g * w1[row + r + c];
                        }
                    }
                }
            }
        }
    }

    // Trunk.
    let (h, w, ks) = (record.height, record.width, params.arch.kernel_size);
    let np = h * w;
    let mut d_act = vec![0.0; np * r];
    for p in 0..np {
        for c in 0..r {
            d_act[c * np + p] = d_feat[p * r + c];
        }
    }
    for (li, layer) in params.layout.trunk.iter().enumerate().rev() {
        let input = if li == 0 { &record.input } else { &record.activations[li - 1] };
        let mut d_in = if li > 0 { Some(vec![0.0; layer.in_ch * np]) } else { None };
        let (wr, br) = (params.blocks[layer.weight].range(), params.blocks[layer.bias].range());
        let (gw, rest) = grad.split_at_mut(br.start);
        conv_relu_backward(
            input,
            &record.activations[li],
            &d_act,
            layer.in_ch,
            layer.out_ch,
            h,
            w,
            ks,
            params.slice(layer.weight),
            &mut gw[wr],
            &mut rest[..br.len()],
            d_in.as_deref_mut(),
        );
        if let Some(d) = d_in {
            d_act = d;
        }
    }
    Ok(grad)
}

/// Holds one recorded forward pass for a later backward call.
#[derive(Debug)]
pub struct EstimatorSession<'a> {
    params: &'a EstimatorParams,
    graph: &'a FactorGraph,
    record: Option<ForwardRecord>,
}

impl<'a> EstimatorSession<'a> {
    pub fn new(params: &'a EstimatorParams, graph: &'a FactorGraph) -> Self {
        EstimatorSession { params, graph, record: None }
    }

    pub fn forward(&mut self, image: &Image) -> Result<&ForwardRecord, EstimatorError> {
        self.record = Some(forward(self.params, self.graph, image)?);
        Ok(self.record.as_ref().expect("just recorded"))
    }

    pub fn record(&self) -> Option<&ForwardRecord> {
        self.record.as_ref()
    }

    pub fn backward(&self, grad_log_marginals: &[f64]) -> Result<Vec<f64>, EstimatorError> {
        let record = self.record.as_ref().ok_or(EstimatorError::NoForwardRecorded)?;
        backward(self.params, self.graph, record, grad_log_marginals)
    }
}
