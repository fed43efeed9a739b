//! Elevation estimation networks: a small conv backbone, the BEV reshape,
//! the monocular 2D head, the stereo similarity volume with its 3D
//! aggregation stack, the expectation readout and the masked loss.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherPlan, Graph, ParamStore, Real, Reduction, Tensor, Var};
use crate::elevation_grid::{BinSpec, ElevationMap, LabelTensor};
use crate::error::{Error, Result};
use crate::voxel_engine::{FeatureVolume, SampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mono,
    Stereo,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mono => "mono",
            ModelKind::Stereo => "stereo",
        }
    }

    pub fn views(self) -> usize {
        match self {
            ModelKind::Mono => 1,
            ModelKind::Stereo => 2,
        }
    }
}

/// How left and right voxel features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeMode {
    #[default]
    Multiply,
    Subtract,
}

impl VolumeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeMode::Multiply => "multiply",
            VolumeMode::Subtract => "subtract",
        }
    }
}

/// Two-stage conv pyramid fused to `channels` at `output_stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub widths: [usize; 2],
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32],
            channels: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub volume_mode: VolumeMode,
    /// Backbone output stride; 4 for mono and 2 for stereo when unset.
    pub feature_stride: Option<usize>,
    /// Must agree with the bin layout when given.
    pub n_classes: Option<usize>,
    pub loss_reduction: Reduction,
    pub sample_mode: SampleMode,
    pub backbone: BackboneConfig,
    /// Width of the 2D head (mono) or of the 3D aggregation stack (stereo).
    pub head_width: usize,
    /// Start the classifier at zero so every cell begins uniform.
    pub zero_init_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mono,
            volume_mode: VolumeMode::Multiply,
            feature_stride: None,
            n_classes: None,
            loss_reduction: Reduction::Mean,
            sample_mode: SampleMode::Nearest,
            backbone: BackboneConfig::default(),
            head_width: 16,
            zero_init_output: false,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.feature_stride.unwrap_or(match self.kind {
            ModelKind::Mono => 4,
            ModelKind::Stereo => 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4].contains(&self.stride()) {
            return Err(Error::config("model.feature_stride", format!("must be 2 or 4, got {}", self.stride())));
        }
        let b = &self.backbone;
        if b.widths.contains(&0) || b.channels == 0 {
            return Err(Error::config("model.backbone", "widths and channels must be positive"));
        }
        if self.head_width == 0 {
            return Err(Error::config("model.head_width", "must be positive"));
        }
        if self.n_classes == Some(0) {
            return Err(Error::config("model.n_classes", "must be positive"));
        }
        Ok(())
    }
}

/// Shape of the voxel stack the heads read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeDims {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

const STEREO_ENTRY_LAYERS: usize = 6;
const HOURGLASSES: usize = 3;

fn he_normal<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("matching length")
}

fn insert_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: Vec<usize>,
    zero: bool,
    rng: &mut impl Rng,
) {
    let fan_in: usize = shape[1..].iter().product();
    let cout = shape[0];
    let w = if zero { Tensor::zeros(shape) } else { he_normal(shape, fan_in, rng) };
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

fn insert_affine<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.scale"), Tensor::filled(vec![c], T::one()));
    store.insert(format!("{name}.shift"), Tensor::zeros(vec![c]));
}

/// Fresh parameters for `cfg` over a voxel stack of `nz` layers.
pub fn init_params<T: Real>(cfg: &ModelConfig, n_classes: usize, nz: usize, rng: &mut impl Rng) -> ParamStore<T> {
    let mut s = ParamStore::new();
    let [w1, w2] = cfg.backbone.widths;
    let c = cfg.backbone.channels;
    let h = cfg.head_width;
    insert_conv(&mut s, "backbone.s1a", vec![w1, 3, 3, 3], false, rng);
    insert_affine(&mut s, "backbone.s1a.norm", w1);
    insert_conv(&mut s, "backbone.s1b", vec![w1, w1, 3, 3], false, rng);
    insert_conv(&mut s, "backbone.s2a", vec![w2, w1, 3, 3], false, rng);
    insert_affine(&mut s, "backbone.s2a.norm", w2);
    insert_conv(&mut s, "backbone.s2b", vec![w2, w2, 3, 3], false, rng);
    insert_conv(&mut s, "backbone.fuse", vec![c, w1 + w2, 1, 1], false, rng);
    match cfg.kind {
        ModelKind::Mono => {
            insert_conv(&mut s, "mono.in", vec![h, c * nz, 1, 1], false, rng);
            insert_conv(&mut s, "mono.c1", vec![h, h, 3, 3], false, rng);
            insert_conv(&mut s, "mono.c2", vec![h, h, 3, 3], false, rng);
            insert_conv(&mut s, "mono.out", vec![n_classes, h, 1, 1], cfg.zero_init_output, rng);
        }
        ModelKind::Stereo => {
            insert_conv(&mut s, "stereo.c0", vec![h, c, 1, 1, 1], false, rng);
            for l in 1..STEREO_ENTRY_LAYERS {
                insert_conv(&mut s, &format!("stereo.c{l}"), vec![h, h, 3, 3, 3], false, rng);
            }
            for k in 0..HOURGLASSES {
                insert_conv(&mut s, &format!("stereo.hg{k}"), vec![h, h, 3, 3, 3], false, rng);
            }
            insert_conv(&mut s, "stereo.out", vec![1, h, 3, 3, 3], cfg.zero_init_output, rng);
        }
    }
    s
}

fn conv2d<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn conv3d<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    g.conv3d(x, w, Some(b), stride, pad)
}

fn affine<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let scale = g.param(p, &format!("{name}.scale"))?;
    let shift = g.param(p, &format!("{name}.shift"))?;
    g.channel_affine(x, scale, shift)
}

/// `[3, H, W]` image to `[C, H/s, W/s]` features.
pub fn backbone_forward<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, image: Var, stride: usize) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 || ![2, 4].contains(&stride) {
        return Err(Error::Contract(format!(
            "backbone needs a [3, H, W] image with H, W divisible by 4 and stride 2 or 4, got {shape:?} at stride {stride}"
        )));
    }
    let (oh, ow) = (shape[1] / stride, shape[2] / stride);
    let x = conv2d(g, p, "backbone.s1a", image, 2, 1)?;
    let x = affine(g, p, "backbone.s1a.norm", x)?;
    let x = g.relu(x);
    let x = conv2d(g, p, "backbone.s1b", x, 1, 1)?;
    let s1 = g.relu(x);
    let x = conv2d(g, p, "backbone.s2a", s1, 2, 1)?;
    let x = affine(g, p, "backbone.s2a.norm", x)?;
    let x = g.relu(x);
    let x = conv2d(g, p, "backbone.s2b", x, 1, 1)?;
    let s2 = g.relu(x);
    let s1 = if stride == 2 { s1 } else { g.nearest_resize(s1, oh, ow)? };
    let s2 = if stride == 4 { s2 } else { g.nearest_resize(s2, oh, ow)? };
    let cat = g.concat(&[s1, s2])?;
    conv2d(g, p, "backbone.fuse", cat, 1, 0)
}

/// `[C, nz, ny, nx]` to `[C*nz, ny, nx]`; element `(c, k, i, j)` lands on
/// channel `c*nz + k`.
pub fn reshape_to_bev<T: Real>(vol: &Tensor<T>) -> Result<Tensor<T>> {
    let s = vol.shape();
    if s.len() != 4 {
        return Err(Error::Contract(format!("expected a [C, nz, ny, nx] volume, got {s:?}")));
    }
    vol.clone().reshaped(vec![s[0] * s[1], s[2], s[3]])
}

/// Inverse of [`reshape_to_bev`].
pub fn reshape_from_bev<T: Real>(bev: &Tensor<T>, nz: usize) -> Result<Tensor<T>> {
    let s = bev.shape();
    if s.len() != 3 || nz == 0 || s[0] % nz != 0 {
        return Err(Error::Contract(format!("cannot split {s:?} into {nz} layers")));
    }
    bev.clone().reshaped(vec![s[0] / nz, nz, s[1], s[2]])
}

/// 2D conv stack from the BEV feature `[C*nz, ny, nx]` to `[Nc, ny, nx]`.
pub fn mono_head<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, bev: Var) -> Result<Var> {
    let x = conv2d(g, p, "mono.in", bev, 1, 0)?;
    let x = g.relu(x);
    let x = conv2d(g, p, "mono.c1", x, 1, 1)?;
    let x = g.relu(x);
    let x = conv2d(g, p, "mono.c2", x, 1, 1)?;
    let x = g.relu(x);
    conv2d(g, p, "mono.out", x, 1, 0)
}

/// Similarity volume of two voxel feature stacks, zeroed wherever either
/// view is invalid. Returns the volume and the joint validity.
pub fn build_bev_volume<T: Real>(
    left: &FeatureVolume<T>,
    right: &FeatureVolume<T>,
    mode: VolumeMode,
) -> Result<FeatureVolume<T>> {
    if left.data.shape() != right.data.shape() || left.valid.len() != right.valid.len() {
        return Err(Error::Contract(format!(
            "left volume {:?} and right volume {:?} differ",
            left.data.shape(),
            right.data.shape()
        )));
    }
    let valid: Vec<bool> = left.valid.iter().zip(&right.valid).map(|(a, b)| *a && *b).collect();
    let n = valid.len();
    let data = left
        .data
        .data()
        .iter()
        .zip(right.data.data())
        .enumerate()
        .map(|(idx, (&a, &b))| {
            if !valid[idx % n] {
                T::zero()
            } else {
                match mode {
                    VolumeMode::Multiply => a * b,
                    VolumeMode::Subtract => a - b,
                }
            }
        })
        .collect();
    Ok(FeatureVolume {
        data: Tensor::new(left.data.shape().to_vec(), data)?,
        valid,
    })
}

/// Graph form of [`build_bev_volume`]; `joint_mask` is the joint validity
/// broadcast over channels.
fn volume_in_graph<T: Real>(g: &mut Graph<T>, left: Var, right: Var, joint_mask: Var, mode: VolumeMode) -> Result<Var> {
    let v = match mode {
        VolumeMode::Multiply => g.mul(left, right)?,
        VolumeMode::Subtract => g.sub(left, right)?,
    };
    g.mul(v, joint_mask)
}

/// 3D aggregation of a `[C, nz, ny, nx]` volume down to one channel, then
/// linear resampling of the layer axis to `n_classes` logits.
pub fn stereo_aggregate<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, vol: Var, n_classes: usize) -> Result<Var> {
    let x = conv3d(g, p, "stereo.c0", vol, 1, 0)?;
    let mut x = g.relu(x);
    for l in 1..STEREO_ENTRY_LAYERS {
        let y = conv3d(g, p, &format!("stereo.c{l}"), x, 1, 1)?;
        x = g.relu(y);
    }
    for k in 0..HOURGLASSES {
        let dims = g.shape(x)[1..].to_vec();
        let y = conv3d(g, p, &format!("stereo.hg{k}"), x, 2, 1)?;
        let mut y = g.relu(y);
        for (axis, &n) in dims.iter().enumerate() {
            y = g.linear_resize(y, axis + 1, n)?;
        }
        x = g.add(x, y)?;
    }
    let x = conv3d(g, p, "stereo.out", x, 1, 1)?;
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, s[1..].to_vec())?;
    g.linear_resize(x, 0, n_classes)
}

/// One camera's input: the image and how voxels sample its feature map.
#[derive(Debug, Clone)]
pub struct ViewInput<T> {
    pub image: Tensor<T>,
    pub plan: Arc<GatherPlan>,
    pub valid: Arc<Vec<bool>>,
}

/// Full forward pass from images to `[Nc, ny, nx]` logits.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    views: &[ViewInput<T>],
    dims: VolumeDims,
    n_classes: usize,
) -> Result<Var> {
    if views.len() != cfg.kind.views() {
        return Err(Error::Contract(format!(
            "{} model needs {} view(s), got {}",
            cfg.kind.as_str(),
            cfg.kind.views(),
            views.len()
        )));
    }
    let stride = cfg.stride();
    let mut voxels = Vec::with_capacity(views.len());
    for view in views {
        if view.plan.out_dims != [dims.nz, dims.ny, dims.nx] {
            return Err(Error::Contract(format!(
                "sampling plan covers {:?}, model expects {:?}",
                view.plan.out_dims,
                [dims.nz, dims.ny, dims.nx]
            )));
        }
        let img = g.input(view.image.clone());
        let feat = backbone_forward(g, p, img, stride)?;
        voxels.push(g.gather(feat, view.plan.clone())?);
    }
    match cfg.kind {
        ModelKind::Mono => {
            let s = g.shape(voxels[0]).to_vec();
            let bev = g.reshape(voxels[0], vec![s[0] * s[1], s[2], s[3]])?;
            mono_head(g, p, bev)
        }
        ModelKind::Stereo => {
            let shape = g.shape(voxels[0]).to_vec();
            let n = views[0].valid.len();
            let mask: Vec<T> = (0..shape[0] * n)
                .map(|idx| {
                    let v = idx % n;
                    if views[0].valid[v] && views[1].valid[v] { T::one() } else { T::zero() }
                })
                .collect();
            let mask = g.input(Tensor::new(shape, mask)?);
            let vol = volume_in_graph(g, voxels[0], voxels[1], mask, cfg.volume_mode)?;
            stereo_aggregate(g, p, vol, n_classes)
        }
    }
}

/// Per-cell expectation of bin centres under the softmax of `[Nc, ny, nx]`
/// logits, evaluated in f64. The returned map is fully valid.
pub fn soft_argmin<T: Real>(logits: &Tensor<T>, bins: &BinSpec) -> Result<ElevationMap> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != bins.n_classes {
        return Err(Error::Contract(format!(
            "logits {s:?} do not match {} classes",
            bins.n_classes
        )));
    }
    let (nc, p) = (s[0], s[1] * s[2]);
    let centers = bins.centers();
    let data = logits.data();
    let mut values = vec![0.0; p];
    for (pos, out) in values.iter_mut().enumerate() {
        let m = (0..nc).map(|c| data[c * p + pos].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut acc = 0.0;
        for (c, e) in centers.iter().enumerate() {
            let w = (data[c * p + pos].as_f64() - m).exp();
            z += w;
            acc += w * e;
        }
        *out = acc / z;
    }
    Ok(ElevationMap::dense(s[1], s[2], values))
}

/// Loss node plus supervision bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub n_valid: usize,
    /// Set when no cell carried a label; the loss is then exactly zero.
    pub no_supervision: bool,
}

pub fn masked_ce_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &LabelTensor,
    reduction: Reduction,
) -> Result<LossOutput> {
    let s = g.shape(logits).to_vec();
    if s != [labels.n_classes, labels.ny, labels.nx] {
        return Err(Error::Contract(format!(
            "logits {s:?} do not match labels {:?}",
            [labels.n_classes, labels.ny, labels.nx]
        )));
    }
    let n_valid = labels.valid_count();
    if n_valid == 0 {
        log::warn!("no labelled cells: loss has no supervision");
    }
    let loss = g.masked_cross_entropy(logits, Arc::new(labels.classes.clone()), reduction)?;
    Ok(LossOutput {
        loss,
        n_valid,
        no_supervision: n_valid == 0,
    })
}
