//! The conditional generator and the multi-task classifier.
//!
//! Generator: per-feature two-layer fc embeddings, concatenated, two trunk
//! fc layers, reshaped to a seed feature map, then a stack of stride-2
//! transposed convolutions. LeakyReLU follows every learned layer except the
//! last; the output is linear.
//!
//! Classifier: an AlexNet-style conv stack (first conv strided) shared by
//! all features, then one head of two fc layers per feature producing logits.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, Storable};
use crate::error::{GcnError, Result};
use crate::layers::{conv_output_size, deconv_output_size, ConvSpec, DeconvSpec, PoolSpec};
use crate::schema::FeatureSchema;
use crate::tensor::{Init, RngState, Scalar, Tensor};

pub const GENERATOR_SLOPE: f64 = 0.1;
pub const CLASSIFIER_SLOPE: f64 = 0.2;
/// Recorded in checkpoint metadata.
pub const INIT_SCHEME: &str = "gaussian(0, sqrt(2/fan_in)) weights, zero biases";

fn generator_slope() -> f64 {
    GENERATOR_SLOPE
}

fn classifier_slope() -> f64 {
    CLASSIFIER_SLOPE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub schema: FeatureSchema,
    /// Widths of the two fc layers applied to each feature vector.
    pub embed_dims: [usize; 2],
    /// Widths of the two trunk fc layers; the second equals the seed volume.
    pub trunk_dims: [usize; 2],
    /// `(channels, height, width)` of the map the trunk output is reshaped to.
    pub seed_shape: [usize; 3],
    pub deconv: Vec<DeconvSpec>,
    /// Expected `(height, width)` of the generated image.
    pub target_size: [usize; 2],
    #[serde(default = "generator_slope")]
    pub slope: f64,
}

impl GeneratorSpec {
    /// 158x158 RGB: seed 256x8x8 and four k=4, s=2, p=0 layers (8, 18, 38, 78, 158).
    pub fn face_scale(schema: FeatureSchema) -> Self {
        let chans = [256, 128, 64, 32, 3];
        GeneratorSpec {
            schema,
            embed_dims: [256, 256],
            trunk_dims: [1024, 256 * 8 * 8],
            seed_shape: [256, 8, 8],
            deconv: deconv_stack(&chans, 4, 2, 0),
            target_size: [158, 158],
            slope: GENERATOR_SLOPE,
        }
    }

    /// 28x28 RGB: seed 256x7x7 and two k=4, s=2, p=1 layers (7, 14, 28).
    pub fn digit_scale(schema: FeatureSchema) -> Self {
        GeneratorSpec {
            schema,
            embed_dims: [256, 256],
            trunk_dims: [1024, 256 * 7 * 7],
            seed_shape: [256, 7, 7],
            deconv: deconv_stack(&[256, 64, 3], 4, 2, 1),
            target_size: [28, 28],
            slope: GENERATOR_SLOPE,
        }
    }

    /// The 28x28 geometry with narrower layers, sized for CPU experiments.
    pub fn desk(schema: FeatureSchema) -> Self {
        GeneratorSpec {
            schema,
            embed_dims: [64, 64],
            trunk_dims: [256, 64 * 7 * 7],
            seed_shape: [64, 7, 7],
            deconv: deconv_stack(&[64, 32, 3], 4, 2, 1),
            target_size: [28, 28],
            slope: GENERATOR_SLOPE,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.deconv
            .last()
            .map_or(self.seed_shape[0], |d| d.out_channels)
    }

    /// Spatial sizes after each transposed conv, starting from the seed map.
    pub fn resolution_chain(&self) -> Result<Vec<[usize; 2]>> {
        let mut cur = [self.seed_shape[1], self.seed_shape[2]];
        let mut chain = vec![cur];
        for d in &self.deconv {
            cur = [
                deconv_output_size(cur[0], d.stride, d.kernel_size, d.pad)?,
                deconv_output_size(cur[1], d.stride, d.kernel_size, d.pad)?,
            ];
            chain.push(cur);
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.embed_dims.contains(&0) || self.trunk_dims.contains(&0) || self.seed_shape.contains(&0) {
            return Err(GcnError::Geometry("generator widths must be positive".into()));
        }
        let seed_volume: usize = self.seed_shape.iter().product();
        if self.trunk_dims[1] != seed_volume {
            return Err(GcnError::Geometry(format!(
                "trunk output width {} must equal seed volume {seed_volume} ({:?})",
                self.trunk_dims[1], self.seed_shape
            )));
        }
        let mut channels = self.seed_shape[0];
        for (i, d) in self.deconv.iter().enumerate() {
            if d.in_channels != channels {
                return Err(GcnError::Geometry(format!(
                    "deconv layer {i} expects {} input channels, previous layer gives {channels}",
                    d.in_channels
                )));
            }
            channels = d.out_channels;
        }
        let chain = self.resolution_chain()?;
        let out = *chain.last().expect("non-empty chain");
        if out != self.target_size {
            return Err(GcnError::Geometry(format!(
                "deconv chain {chain:?} ends at {out:?}, target is {:?}",
                self.target_size
            )));
        }
        Ok(())
    }
}

fn deconv_stack(channels: &[usize], k: usize, s: usize, p: usize) -> Vec<DeconvSpec> {
    channels
        .windows(2)
        .map(|w| DeconvSpec {
            in_channels: w[0],
            out_channels: w[1],
            kernel_size: k,
            stride: s,
            pad: p,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub conv: ConvSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub schema: FeatureSchema,
    /// `(channels, height, width)` of input images.
    pub input_shape: [usize; 3],
    pub conv: Vec<ConvLayer>,
    /// Hidden width of each per-feature head (fc -> hidden -> K_f).
    pub head_hidden: usize,
    #[serde(default = "classifier_slope")]
    pub slope: f64,
}

fn conv_layer(c_in: usize, c_out: usize, k: usize, s: usize, p: usize, pool: Option<(usize, usize)>) -> ConvLayer {
    ConvLayer {
        conv: ConvSpec {
            in_channels: c_in,
            out_channels: c_out,
            kernel_size: k,
            stride: s,
            pad: p,
        },
        pool: pool.map(|(kernel_size, stride)| PoolSpec { kernel_size, stride }),
    }
}

impl ClassifierSpec {
    /// Five convs on 158x158 input, first conv stride 2:
    /// 158 -> 75 -> pool 37 -> 37 -> pool 18 -> 18 -> 18 -> 18 -> pool 9.
    pub fn face_scale(schema: FeatureSchema) -> Self {
        ClassifierSpec {
            schema,
            input_shape: [3, 158, 158],
            conv: vec![
                conv_layer(3, 64, 10, 2, 0, Some((3, 2))),
                conv_layer(64, 128, 5, 1, 2, Some((3, 2))),
                conv_layer(128, 192, 3, 1, 1, None),
                conv_layer(192, 192, 3, 1, 1, None),
                conv_layer(192, 128, 3, 1, 1, Some((2, 2))),
            ],
            head_hidden: 256,
            slope: CLASSIFIER_SLOPE,
        }
    }

    /// Three convs on 28x28 input: 28 -> 14 -> 14 -> pool 7 -> 7 -> pool 3.
    pub fn digit_scale(schema: FeatureSchema) -> Self {
        Self::small(schema, [32, 64, 64], 128)
    }

    /// The 28x28 layout with narrow layers.
    pub fn desk(schema: FeatureSchema) -> Self {
        Self::small(schema, [8, 16, 16], 32)
    }

    fn small(schema: FeatureSchema, ch: [usize; 3], head_hidden: usize) -> Self {
        ClassifierSpec {
            schema,
            input_shape: [3, 28, 28],
            conv: vec![
                conv_layer(3, ch[0], 4, 2, 1, None),
                conv_layer(ch[0], ch[1], 3, 1, 1, Some((2, 2))),
                conv_layer(ch[1], ch[2], 3, 1, 1, Some((3, 2))),
            ],
            head_hidden,
            slope: CLASSIFIER_SLOPE,
        }
    }

    /// `(channels, h, w)` after the conv stack.
    pub fn feature_map_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        for (i, l) in self.conv.iter().enumerate() {
            if l.conv.in_channels != c {
                return Err(GcnError::Geometry(format!(
                    "conv layer {i} expects {} input channels, got {c}",
                    l.conv.in_channels
                )));
            }
            let (k, s, p) = (l.conv.kernel_size, l.conv.stride, l.conv.pad);
            h = conv_output_size(h, k, s, p)?;
            w = conv_output_size(w, k, s, p)?;
            c = l.conv.out_channels;
            if let Some(pool) = l.pool {
                h = conv_output_size(h, pool.kernel_size, pool.stride, 0)?;
                w = conv_output_size(w, pool.kernel_size, pool.stride, 0)?;
            }
        }
        Ok([c, h, w])
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.head_hidden == 0 || self.input_shape.contains(&0) {
            return Err(GcnError::Geometry("classifier widths must be positive".into()));
        }
        self.feature_map_shape().map(|_| ())
    }
}

/// A generator layout without its feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub embed_dims: [usize; 2],
    pub trunk_dims: [usize; 2],
    pub seed_shape: [usize; 3],
    pub deconv: Vec<DeconvSpec>,
    pub target_size: [usize; 2],
    #[serde(default = "generator_slope")]
    pub slope: f64,
}

impl GeneratorArch {
    pub fn with_schema(self, schema: FeatureSchema) -> GeneratorSpec {
        GeneratorSpec {
            schema,
            embed_dims: self.embed_dims,
            trunk_dims: self.trunk_dims,
            seed_shape: self.seed_shape,
            deconv: self.deconv,
            target_size: self.target_size,
            slope: self.slope,
        }
    }
}

impl From<GeneratorSpec> for GeneratorArch {
    fn from(s: GeneratorSpec) -> Self {
        GeneratorArch {
            embed_dims: s.embed_dims,
            trunk_dims: s.trunk_dims,
            seed_shape: s.seed_shape,
            deconv: s.deconv,
            target_size: s.target_size,
            slope: s.slope,
        }
    }
}

/// A classifier layout without its feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub input_shape: [usize; 3],
    pub conv: Vec<ConvLayer>,
    pub head_hidden: usize,
    #[serde(default = "classifier_slope")]
    pub slope: f64,
}

impl ClassifierArch {
    pub fn with_schema(self, schema: FeatureSchema) -> ClassifierSpec {
        ClassifierSpec {
            schema,
            input_shape: self.input_shape,
            conv: self.conv,
            head_hidden: self.head_hidden,
            slope: self.slope,
        }
    }
}

impl From<ClassifierSpec> for ClassifierArch {
    fn from(s: ClassifierSpec) -> Self {
        ClassifierArch {
            input_shape: s.input_shape,
            conv: s.conv,
            head_hidden: s.head_hidden,
            slope: s.slope,
        }
    }
}

/// Named size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Face,
    Digit,
    Desk,
}

impl Scale {
    pub fn generator(self, schema: FeatureSchema) -> GeneratorSpec {
        match self {
            Scale::Face => GeneratorSpec::face_scale(schema),
            Scale::Digit => GeneratorSpec::digit_scale(schema),
            Scale::Desk => GeneratorSpec::desk(schema),
        }
    }

    pub fn classifier(self, schema: FeatureSchema) -> ClassifierSpec {
        match self {
            Scale::Face => ClassifierSpec::face_scale(schema),
            Scale::Digit => ClassifierSpec::digit_scale(schema),
            Scale::Desk => ClassifierSpec::desk(schema),
        }
    }

    pub fn generator_arch(self) -> GeneratorArch {
        self.generator(FeatureSchema::digits()).into()
    }

    pub fn classifier_arch(self) -> ClassifierArch {
        self.classifier(FeatureSchema::digits()).into()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Add every tensor as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Add every tensor as a constant (inference only).
    pub fn bind_constants(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }
}

/// Parameter layout: names, shapes and fan-in, in creation order.
#[derive(Default)]
struct Layout {
    entries: Vec<(String, Vec<usize>, Option<usize>)>,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, fan_in: Option<usize>) -> usize {
        self.entries.push((name, shape, fan_in));
        self.entries.len() - 1
    }

    fn dense(&mut self, prefix: &str, w_shape: Vec<usize>, fan_in: usize, bias: usize) -> Dense {
        Dense {
            w: self.add(format!("{prefix}.w"), w_shape, Some(fan_in)),
            b: self.add(format!("{prefix}.b"), vec![bias], None),
        }
    }

    fn init<T: Scalar>(&self, rng: &mut RngState) -> Result<ParamSet<T>> {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, shape, fan_in) in &self.entries {
            let init = match fan_in {
                Some(f) => Init::Gaussian {
                    mean: 0.0,
                    std: (2.0 / *f as f64).sqrt(),
                },
                None => Init::Zeros,
            };
            names.push(name.clone());
            tensors.push(Tensor::create(shape.clone(), init, rng)?);
        }
        Ok(ParamSet { names, tensors })
    }

    fn load<T: Storable>(&self, ckpt: &mut Checkpoint) -> Result<ParamSet<T>> {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, shape, _) in &self.entries {
            let t: Tensor<T> = ckpt.take(name)?;
            if t.shape() != shape.as_slice() {
                return Err(GcnError::Schema(format!(
                    "tensor {name:?} has shape {:?}, spec needs {shape:?}",
                    t.shape()
                )));
            }
            names.push(name.clone());
            tensors.push(t);
        }
        if let Some((extra, _)) = ckpt.records.first() {
            return Err(GcnError::Schema(format!(
                "checkpoint has unexpected tensor {extra:?}"
            )));
        }
        Ok(ParamSet { names, tensors })
    }
}

fn save_params<T: Storable>(
    path: &Path,
    kind: &str,
    spec: serde_json::Value,
    params: &ParamSet<T>,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(json!({
        "kind": kind,
        "spec": spec,
        "dtype": T::DTYPE,
        "init": INIT_SCHEME,
    }));
    for (n, t) in params.names.iter().zip(&params.tensors) {
        ckpt.push(n.clone(), t);
    }
    ckpt.save(path)
}

fn open_checkpoint(path: &Path, kind: &str) -> Result<(Checkpoint, serde_json::Value)> {
    let ckpt = Checkpoint::load(path)?;
    let found = ckpt.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(GcnError::Schema(format!(
            "{}: expected a {kind} checkpoint, found {found:?}",
            path.display()
        )));
    }
    let spec = ckpt
        .meta
        .get("spec")
        .cloned()
        .ok_or_else(|| GcnError::Schema("checkpoint metadata lacks a spec".into()))?;
    Ok((ckpt, spec))
}

#[derive(Clone, Debug)]
struct GeneratorLayout {
    features: Vec<[Dense; 2]>,
    trunk: [Dense; 2],
    deconv: Vec<Dense>,
}

fn generator_layout(spec: &GeneratorSpec) -> (Layout, GeneratorLayout) {
    let mut l = Layout::default();
    let [e1, e2] = spec.embed_dims;
    let features = spec
        .schema
        .features
        .iter()
        .map(|f| {
            let p = format!("gen.feature.{}", f.name);
            [
                l.dense(&format!("{p}.fc1"), vec![f.cardinality, e1], f.cardinality, e1),
                l.dense(&format!("{p}.fc2"), vec![e1, e2], e1, e2),
            ]
        })
        .collect();
    let [t1, t2] = spec.trunk_dims;
    let concat = e2 * spec.schema.len();
    let trunk = [
        l.dense("gen.trunk.fc1", vec![concat, t1], concat, t1),
        l.dense("gen.trunk.fc2", vec![t1, t2], t1, t2),
    ];
    let deconv = spec
        .deconv
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let k = d.kernel_size;
            // Each output pixel sees about in_channels * (k / stride)^2 taps.
            let fan_in = (d.in_channels * k * k / (d.stride * d.stride)).max(1);
            l.dense(
                &format!("gen.deconv{}", i + 1),
                vec![d.in_channels, d.out_channels, k, k],
                fan_in,
                d.out_channels,
            )
        })
        .collect();
    (
        l,
        GeneratorLayout {
            features,
            trunk,
            deconv,
        },
    )
}

#[derive(Clone, Debug)]
pub struct GeneratorModel<T: Scalar = f32> {
    spec: GeneratorSpec,
    params: ParamSet<T>,
    layout: GeneratorLayout,
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn build(spec: GeneratorSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let (l, layout) = generator_layout(&spec);
        let params = l.init(rng)?;
        Ok(GeneratorModel {
            spec,
            params,
            layout,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.spec.schema
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Forward pass. `features[f]` is a `[batch, K_f]` tensor of one-hot or
    /// blended feature vectors; returns `[batch, C, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], features: &[Var]) -> Result<Var> {
        let schema = &self.spec.schema;
        if features.len() != schema.len() {
            return Err(GcnError::Schema(format!(
                "generator takes {} feature vectors, got {}",
                schema.len(),
                features.len()
            )));
        }
        let batch = g.value(features[0]).shape()[0];
        for (f, (&v, feat)) in features.iter().zip(&schema.features).enumerate() {
            if g.value(v).shape() != [batch, feat.cardinality] {
                return Err(GcnError::Schema(format!(
                    "feature {f} ({:?}) must be [{batch}, {}], got {:?}",
                    feat.name,
                    feat.cardinality,
                    g.value(v).shape()
                )));
            }
        }
        let slope = self.spec.slope;
        let dense = |g: &mut Graph<T>, x: Var, d: Dense| g.linear(x, params[d.w], params[d.b]);

        let mut embeds = Vec::with_capacity(features.len());
        for (&x, layers) in features.iter().zip(&self.layout.features) {
            let h = dense(g, x, layers[0])?;
            let h = g.leaky_relu(h, slope);
            let h = dense(g, h, layers[1])?;
            embeds.push(g.leaky_relu(h, slope));
        }
        let joint = g.concat(&embeds, 1)?;
        let h = dense(g, joint, self.layout.trunk[0])?;
        let h = g.leaky_relu(h, slope);
        let h = dense(g, h, self.layout.trunk[1])?;
        let h = g.leaky_relu(h, slope);
        let [c, hh, ww] = self.spec.seed_shape;
        let mut x = g.reshape(h, &[batch, c, hh, ww])?;
        let last = self.spec.deconv.len().saturating_sub(1);
        for (i, (spec, d)) in self.spec.deconv.iter().zip(&self.layout.deconv).enumerate() {
            x = g.deconv2d(x, params[d.w], params[d.b], spec)?;
            if i < last {
                x = g.leaky_relu(x, slope);
            }
        }
        Ok(x)
    }

    /// Inference helper on plain tensors.
    pub fn generate(&self, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_constants(&mut g);
        let f: Vec<Var> = features.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &p, &f)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Storable> GeneratorModel<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_params(
            path.as_ref(),
            "generator",
            serde_json::to_value(&self.spec)?,
            &self.params,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut ckpt, spec) = open_checkpoint(path.as_ref(), "generator")?;
        let spec: GeneratorSpec = serde_json::from_value(spec)?;
        spec.validate()?;
        let (l, layout) = generator_layout(&spec);
        let params = l.load(&mut ckpt)?;
        Ok(GeneratorModel {
            spec,
            params,
            layout,
        })
    }
}

#[derive(Clone, Debug)]
struct ClassifierLayout {
    conv: Vec<Dense>,
    heads: Vec<[Dense; 2]>,
}

fn classifier_layout(spec: &ClassifierSpec) -> Result<(Layout, ClassifierLayout)> {
    let mut l = Layout::default();
    let conv = spec
        .conv
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let s = c.conv;
            let k = s.kernel_size;
            l.dense(
                &format!("cls.conv{}", i + 1),
                vec![s.out_channels, s.in_channels, k, k],
                s.in_channels * k * k,
                s.out_channels,
            )
        })
        .collect();
    let flat: usize = spec.feature_map_shape()?.iter().product();
    let hid = spec.head_hidden;
    let heads = spec
        .schema
        .features
        .iter()
        .map(|f| {
            let p = format!("cls.head.{}", f.name);
            [
                l.dense(&format!("{p}.fc1"), vec![flat, hid], flat, hid),
                l.dense(&format!("{p}.fc2"), vec![hid, f.cardinality], hid, f.cardinality),
            ]
        })
        .collect();
    Ok((l, ClassifierLayout { conv, heads }))
}

#[derive(Clone, Debug)]
pub struct ClassifierModel<T: Scalar = f32> {
    spec: ClassifierSpec,
    params: ParamSet<T>,
    layout: ClassifierLayout,
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn build(spec: ClassifierSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let (l, layout) = classifier_layout(&spec)?;
        let params = l.init(rng)?;
        Ok(ClassifierModel {
            spec,
            params,
            layout,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.spec.schema
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Per-feature logits `[batch, K_f]` for `[batch, C, H, W]` images.
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], images: Var) -> Result<Vec<Var>> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(GcnError::shape(format!(
                "classifier expects [batch, {:?}], got {shape:?}",
                self.spec.input_shape
            )));
        }
        let batch = shape[0];
        let slope = self.spec.slope;
        let mut x = images;
        for (layer, d) in self.spec.conv.iter().zip(&self.layout.conv) {
            x = g.conv2d(x, params[d.w], params[d.b], &layer.conv)?;
            x = g.leaky_relu(x, slope);
            if let Some(pool) = &layer.pool {
                x = g.max_pool2d(x, pool)?;
            }
        }
        let flat: usize = g.value(x).shape()[1..].iter().product();
        let x = g.reshape(x, &[batch, flat])?;
        let mut logits = Vec::with_capacity(self.layout.heads.len());
        for head in &self.layout.heads {
            let h = g.linear(x, params[head[0].w], params[head[0].b])?;
            let h = g.leaky_relu(h, slope);
            logits.push(g.linear(h, params[head[1].w], params[head[1].b])?);
        }
        Ok(logits)
    }

    /// Inference helper: per-feature logits for a batch of images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.params.bind_constants(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

impl<T: Storable> ClassifierModel<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_params(
            path.as_ref(),
            "classifier",
            serde_json::to_value(&self.spec)?,
            &self.params,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut ckpt, spec) = open_checkpoint(path.as_ref(), "classifier")?;
        let spec: ClassifierSpec = serde_json::from_value(spec)?;
        spec.validate()?;
        let (l, layout) = classifier_layout(&spec)?;
        let params = l.load(&mut ckpt)?;
        Ok(ClassifierModel {
            spec,
            params,
            layout,
        })
    }
}

/// One-hot rows for a batch of class indices.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([labels.len().max(1), classes])?;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(GcnError::Label(format!("label {l} out of range 0..{classes}")));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schema() -> FeatureSchema {
        FeatureSchema::glyphs(4, 3, false)
    }

    #[test]
    fn face_scale_geometry_reaches_158() {
        let spec = GeneratorSpec::face_scale(FeatureSchema::glyphs(70, 4, true));
        spec.validate().unwrap();
        let chain: Vec<usize> = spec.resolution_chain().unwrap().iter().map(|s| s[0]).collect();
        assert_eq!(chain, vec![8, 18, 38, 78, 158]);
        assert_eq!(spec.trunk_dims[1], 16384);
        ClassifierSpec::face_scale(FeatureSchema::glyphs(70, 4, true))
            .validate()
            .unwrap();
    }

    #[test]
    fn digit_scale_geometry_reaches_28() {
        let spec = GeneratorSpec::digit_scale(FeatureSchema::digits());
        let chain: Vec<usize> = spec.resolution_chain().unwrap().iter().map(|s| s[0]).collect();
        assert_eq!(chain, vec![7, 14, 28]);
        assert_eq!(
            ClassifierSpec::digit_scale(FeatureSchema::digits())
                .feature_map_shape()
                .unwrap(),
            [64, 3, 3]
        );
    }

    #[test]
    fn wrong_target_is_a_geometry_error() {
        let mut spec = GeneratorSpec::desk(tiny_schema());
        spec.target_size = [32, 32];
        assert!(matches!(
            GeneratorModel::<f32>::build(spec, &mut RngState::new(0)),
            Err(GcnError::Geometry(_))
        ));
        let mut spec = GeneratorSpec::desk(tiny_schema());
        spec.trunk_dims[1] += 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generator_output_shape_and_blends() {
        let gen = GeneratorModel::<f32>::build(GeneratorSpec::desk(tiny_schema()), &mut RngState::new(1)).unwrap();
        let id = Tensor::from_f64([2, 4], &[0.5, 0.5, 0., 0., 0., 0., 1., 0.]).unwrap();
        let ex = one_hot(&[0, 2], 3).unwrap();
        let out = gen.generate(&[id, ex]).unwrap();
        assert_eq!(out.shape(), &[2, 3, 28, 28]);
        assert!(out.all_finite());
    }

    #[test]
    fn generator_rejects_bad_features() {
        let gen = GeneratorModel::<f32>::build(GeneratorSpec::desk(tiny_schema()), &mut RngState::new(1)).unwrap();
        let id = one_hot(&[0], 4).unwrap();
        assert!(matches!(gen.generate(&[id.clone()]), Err(GcnError::Schema(_))));
        let wrong = one_hot(&[0], 5).unwrap();
        assert!(matches!(gen.generate(&[id, wrong]), Err(GcnError::Schema(_))));
    }

    #[test]
    fn builds_are_deterministic() {
        let a = GeneratorModel::<f32>::build(GeneratorSpec::desk(tiny_schema()), &mut RngState::new(5)).unwrap();
        let b = GeneratorModel::<f32>::build(GeneratorSpec::desk(tiny_schema()), &mut RngState::new(5)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = ClassifierModel::<f32>::build(ClassifierSpec::desk(tiny_schema()), &mut RngState::new(5)).unwrap();
        let d = ClassifierModel::<f32>::build(ClassifierSpec::desk(tiny_schema()), &mut RngState::new(5)).unwrap();
        assert_eq!(c.params(), d.params());
        let names = a.params().names();
        for (i, n) in names.iter().enumerate() {
            assert!(!names[..i].contains(n), "duplicate {n}");
        }
    }

    #[test]
    fn classifier_heads_match_schema() {
        let schema = FeatureSchema::glyphs(70, 4, true);
        let cls = ClassifierModel::<f32>::build(ClassifierSpec::desk(schema), &mut RngState::new(2)).unwrap();
        let x = Tensor::zeros([2, 3, 28, 28]).unwrap();
        let logits = cls.logits(&x).unwrap();
        let widths: Vec<usize> = logits.iter().map(|l| l.shape()[1]).collect();
        assert_eq!(widths, vec![70, 4, 8]);
        assert!(cls.logits(&Tensor::zeros([1, 3, 27, 28]).unwrap()).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut cls = ClassifierModel::<f64>::build(ClassifierSpec::desk(tiny_schema()), &mut RngState::new(3)).unwrap();
        for t in cls.params_mut().tensors_mut() {
            t.fill(0.0);
        }
        let mut rng = RngState::new(4);
        let x = Tensor::create([2, 3, 28, 28], Init::Uniform { lo: 0.0, hi: 1.0 }, &mut rng).unwrap();
        for l in cls.logits(&x).unwrap() {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GeneratorModel::<f32>::build(GeneratorSpec::desk(tiny_schema()), &mut RngState::new(8)).unwrap();
        let cls = ClassifierModel::<f32>::build(ClassifierSpec::desk(tiny_schema()), &mut RngState::new(9)).unwrap();
        gen.save(dir.path().join("g.gcn1")).unwrap();
        cls.save(dir.path().join("c.gcn1")).unwrap();
        let gen2 = GeneratorModel::<f32>::load(dir.path().join("g.gcn1")).unwrap();
        let cls2 = ClassifierModel::<f32>::load(dir.path().join("c.gcn1")).unwrap();
        assert_eq!(gen.params(), gen2.params());
        let feats = [one_hot(&[1], 4).unwrap(), one_hot(&[2], 3).unwrap()];
        let img = gen.generate(&feats).unwrap();
        assert_eq!(img, gen2.generate(&feats).unwrap());
        assert_eq!(cls.logits(&img).unwrap(), cls2.logits(&img).unwrap());
        assert!(GeneratorModel::<f32>::load(dir.path().join("c.gcn1")).is_err());
        assert!(GeneratorModel::<f64>::load(dir.path().join("g.gcn1")).is_err());
    }

    #[test]
    fn permuting_identity_slots_with_weight_rows_is_invisible() {
        let schema = tiny_schema();
        let gen = GeneratorModel::<f64>::build(GeneratorSpec::desk(schema), &mut RngState::new(11)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = gen.clone();
        let w = gen.params().get("gen.feature.identity.fc1.w").unwrap().clone();
        let width = w.shape()[1];
        let pw = permuted.params_mut().get_mut("gen.feature.identity.fc1.w").unwrap();
        for (i, &j) in perm.iter().enumerate() {
            pw.data_mut()[j * width..(j + 1) * width].copy_from_slice(&w.data()[i * width..(i + 1) * width]);
        }
        let ex = one_hot(&[1, 1], 3).unwrap();
        let id = Tensor::from_f64([2, 4], &[0.5, 0.5, 0., 0., 0., 0.25, 0., 0.75]).unwrap();
        let mut pid = id.zeros_like();
        for r in 0..2 {
            for (i, &j) in perm.iter().enumerate() {
                pid.data_mut()[r * 4 + j] = id.data()[r * 4 + i];
            }
        }
        let a = gen.generate(&[id, ex.clone()]).unwrap();
        let b = permuted.generate(&[pid, ex]).unwrap();
        assert!(a.squared_distance(&b).unwrap() < 1e-20);
    }

    #[test]
    fn fresh_models_are_finite_over_many_seeds() {
        let schema = FeatureSchema::glyphs(3, 2, false);
        let feats = [one_hot(&[0, 2], 3).unwrap(), one_hot(&[1, 0], 2).unwrap()];
        for seed in 0..100 {
            let mut rng = RngState::new(seed);
            let gen = GeneratorModel::<f32>::build(GeneratorSpec::desk(schema.clone()), &mut rng).unwrap();
            let cls = ClassifierModel::<f32>::build(ClassifierSpec::desk(schema.clone()), &mut rng).unwrap();
            let img = gen.generate(&feats).unwrap();
            assert!(img.all_finite(), "seed {seed}");
            assert!(cls.logits(&img).unwrap().iter().all(Tensor::all_finite), "seed {seed}");
        }
    }

    #[test]
    fn classifier_input_gradient_matches_finite_differences() {
        let spec = ClassifierSpec {
            schema: FeatureSchema::glyphs(3, 2, false),
            input_shape: [2, 9, 9],
            conv: vec![conv_layer(2, 3, 3, 2, 1, Some((3, 2))), conv_layer(3, 4, 3, 1, 1, None)],
            head_hidden: 5,
            slope: CLASSIFIER_SLOPE,
        };
        let cls = ClassifierModel::<f64>::build(spec, &mut RngState::new(21)).unwrap();
        let mut rng = RngState::new(22);
        let x = Tensor::create([2, 2, 9, 9], Init::Gaussian { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        let worst = crate::gradcheck::check_case(
            |g, v| {
                let p = cls.params().bind_constants(g);
                let logits = cls.forward(g, &p, v[0])?;
                let a = g.softmax_cross_entropy(logits[0], &[2, 0])?;
                let b = g.softmax_cross_entropy(logits[1], &[1, 1])?;
                g.add(a, b)
            },
            &[x],
            1e-5,
            1e-7,
            1.0,
        )
        .unwrap();
        assert!(worst.max_rel_error < 1e-4, "{worst:?}");
    }

    #[test]
    fn arch_and_spec_convert_both_ways() {
        let spec = GeneratorSpec::desk(tiny_schema());
        let arch = GeneratorArch::from(spec.clone());
        assert_eq!(arch.with_schema(tiny_schema()), spec);
        let cspec = ClassifierSpec::digit_scale(tiny_schema());
        assert_eq!(ClassifierArch::from(cspec.clone()).with_schema(tiny_schema()), cspec);
        assert_eq!(Scale::Digit.generator(tiny_schema()), GeneratorSpec::digit_scale(tiny_schema()));
    }
}
