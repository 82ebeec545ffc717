//! Identity blending for data augmentation, a confidence filter, and the
//! original-versus-synthesized recognizer comparison.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{GradBuffer, Graph};
use crate::data::{image_batch, netpbm, DatasetManifest, Sample};
use crate::error::{GcnError, Result};
use crate::layers::{argmax_rows, softmax_rows};
use crate::models::{ClassifierArch, ClassifierModel, GeneratorModel};
use crate::optim::{adam_step, lr_schedule, AdamHyper, AdamState};
use crate::schema::{Feature, FeatureSchema};
use crate::tensor::{RngState, Tensor};
use crate::train::BatchSampler;

/// Identity vector with `alpha` at `a` and `1 - alpha` at `b`.
pub fn blend_identities(a: usize, b: usize, identities: usize, alpha: f64) -> Result<Vec<f64>> {
    if a == b {
        return Err(GcnError::DegenerateBlend(a));
    }
    if a >= identities || b >= identities {
        return Err(GcnError::Label(format!(
            "blend ({a}, {b}) out of range 0..{identities}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GcnError::Config(format!("blend alpha {alpha} must lie in (0, 1)")));
    }
    let mut v = vec![0.0; identities];
    v[a] = alpha;
    v[b] = 1.0 - alpha;
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendSpec {
    pub a: usize,
    pub b: usize,
    pub alpha: f64,
    pub expression: usize,
}

impl BlendSpec {
    /// Identity vector; a self-pair is the plain one-hot.
    pub fn identity_vector(&self, identities: usize) -> Result<Vec<f64>> {
        if self.a == self.b {
            if self.a >= identities {
                return Err(GcnError::Label(format!("identity {} out of range", self.a)));
            }
            let mut v = vec![0.0; identities];
            v[self.a] = 1.0;
            Ok(v)
        } else {
            blend_identities(self.a, self.b, identities, self.alpha)
        }
    }
}

/// Every ordered identity pair (self-pairs included) under every expression:
/// `P * P * E` specs.
pub fn augmentation_plan(identities: usize, expressions: usize, alpha: f64) -> Vec<BlendSpec> {
    let mut out = Vec::with_capacity(identities * identities * expressions);
    for expression in 0..expressions {
        for a in 0..identities {
            for b in 0..identities {
                out.push(BlendSpec {
                    a,
                    b,
                    alpha,
                    expression,
                });
            }
        }
    }
    out
}

/// Single-feature schema for expression recognition.
pub fn expression_schema(generator_schema: &FeatureSchema) -> Result<FeatureSchema> {
    let mut f = generator_schema.feature("expression")?.clone();
    f.weight = 1.0;
    FeatureSchema::new(vec![f])
}

/// Render every plan entry. The generator schema must have `identity` and
/// `expression` features; any other feature is held at class 0 (the
/// canonical transform). Samples carry one label, the expression.
pub fn generate_augmented_dataset(gen: &GeneratorModel<f32>, plan: &[BlendSpec]) -> Result<Vec<Sample>> {
    let schema = gen.schema();
    let id_f = schema.index_of("identity")?;
    let ex_f = schema.index_of("expression")?;
    let expr = &schema.features[ex_f];
    let identities = schema.features[id_f].cardinality;
    let mut out = Vec::with_capacity(plan.len());
    for chunk in plan.chunks(64) {
        let n = chunk.len();
        let mut feats = Vec::with_capacity(schema.len());
        for (f, feat) in schema.features.iter().enumerate() {
            let k = feat.cardinality;
            let mut data = vec![0f64; n * k];
            for (i, spec) in chunk.iter().enumerate() {
                let row = &mut data[i * k..(i + 1) * k];
                if f == id_f {
                    row.copy_from_slice(&spec.identity_vector(identities)?);
                } else if f == ex_f {
                    if spec.expression >= k {
                        return Err(GcnError::Label(format!(
                            "expression {} out of range 0..{k}",
                            spec.expression
                        )));
                    }
                    row[spec.expression] = 1.0;
                } else {
                    row[0] = 1.0;
                }
            }
            feats.push(Tensor::from_f64([n, k], &data)?);
        }
        let images = gen.generate(&feats)?;
        for (i, spec) in chunk.iter().enumerate() {
            let image = images.index_axis0(i)?.map(|v| v.clamp(0.0, 1.0));
            out.push(Sample {
                image,
                labels: vec![spec.expression],
                source: format!("{}/{}_{}.ppm", expr.class_name(spec.expression), spec.a, spec.b),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source: String,
    pub probability: f64,
}

/// Softmax probability of each sample's own label (`labels[0]`) under
/// classifier head `head`.
pub fn label_probabilities(samples: &[Sample], cls: &ClassifierModel<f32>, head: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = cls.logits(&image_batch(&refs)?)?;
        let z = logits
            .get(head)
            .ok_or_else(|| GcnError::Schema(format!("classifier has no head {head}")))?;
        let p = softmax_rows(z)?;
        let k = z.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let l = s.labels[0];
            if l >= k {
                return Err(GcnError::Label(format!("label {l} out of range 0..{k}")));
            }
            out.push(p.data()[i * k + l] as f64);
        }
    }
    Ok(out)
}

/// Keep samples whose intended class probability is at least `threshold`.
pub fn quality_filter(
    samples: Vec<Sample>,
    cls: &ClassifierModel<f32>,
    head: usize,
    threshold: f64,
) -> Result<(Vec<Sample>, Vec<Rejection>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(GcnError::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let probs = label_probabilities(&samples, cls, head)?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (s, p) in samples.into_iter().zip(probs) {
        if p >= threshold {
            kept.push(s);
        } else {
            rejected.push(Rejection {
                source: s.source,
                probability: p,
            });
        }
    }
    Ok((kept, rejected))
}

/// Write samples as netpbm files at their `source` paths under `dir`, plus
/// `manifest.json`.
pub fn export_samples(dir: &Path, schema: &FeatureSchema, samples: &[Sample], seed: u64) -> Result<DatasetManifest> {
    for s in samples {
        let p = dir.join(&s.source);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| GcnError::io(parent, e))?;
        }
        netpbm::save(&s.image, &p)?;
    }
    let m = DatasetManifest::for_files(schema.clone(), ".", samples, seed);
    m.save(dir.join("manifest.json"))?;
    Ok(m)
}

/// Keep only feature `feature` of each label vector.
pub fn relabel(samples: &[Sample], feature: usize) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            labels: vec![s.labels[feature]],
            ..s.clone()
        })
        .collect()
}

fn default_recognizer_batches() -> usize {
    2000
}

fn default_recognizer_batch_size() -> usize {
    64
}

fn default_recognizer_halving() -> usize {
    1000
}

/// Recognizer training setup shared by both comparison arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognizerConfig {
    /// Conv body and head width; the schema comes from the task.
    pub arch: ClassifierArch,
    #[serde(default = "default_recognizer_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_recognizer_batches")]
    pub batches: usize,
    #[serde(default = "default_recognizer_halving")]
    pub halving_period: usize,
    #[serde(default = "AdamHyper::recognizer")]
    pub adam: AdamHyper,
    #[serde(default)]
    pub seed: u64,
}

impl RecognizerConfig {
    pub fn new(arch: ClassifierArch, seed: u64) -> Self {
        RecognizerConfig {
            arch,
            batch_size: default_recognizer_batch_size(),
            batches: default_recognizer_batches(),
            halving_period: default_recognizer_halving(),
            adam: AdamHyper::recognizer(),
            seed,
        }
    }
}

pub struct Recognizer {
    pub model: ClassifierModel<f32>,
    pub accuracy: f64,
}

/// Fraction of samples whose `labels[0]` is the argmax of head 0.
pub fn accuracy(model: &ClassifierModel<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GcnError::Contract("empty test set".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = model.logits(&image_batch(&refs)?)?;
        let pred = argmax_rows(&logits[0]);
        correct += pred.iter().zip(chunk).filter(|(p, s)| **p == s.labels[0]).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train a single-head classifier on `train` (labels `[class]`) and score it
/// on `test`.
pub fn train_recognizer(
    schema: &FeatureSchema,
    train: &[Sample],
    test: &[Sample],
    cfg: &RecognizerConfig,
) -> Result<Recognizer> {
    if schema.len() != 1 {
        return Err(GcnError::Schema("a recognizer has exactly one feature".into()));
    }
    if train.is_empty() {
        return Err(GcnError::Config("recognizer training set is empty".into()));
    }
    cfg.adam.validate()?;
    let spec = cfg.arch.clone().with_schema(schema.clone());
    let mut model = ClassifierModel::build(spec, &mut RngState::new(cfg.seed).fork(2))?;
    let mut state = AdamState::new(model.params().tensors());
    let mut buf = GradBuffer::for_params(model.params().tensors());
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size.max(1), cfg.seed)?;
    for b in 0..cfg.batches {
        let idx = sampler.batch(b);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.labels[0]).collect();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let x = g.constant(image_batch(&batch)?);
        let logits = model.forward(&mut g, &p, x)?;
        let loss = g.softmax_cross_entropy(logits[0], &labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(GcnError::Divergence {
                batch: b,
                detail: format!("recognizer loss {value}"),
            });
        }
        let grads = g.backward(loss)?;
        buf.zero();
        buf.accumulate(&grads, &p)?;
        let lr = lr_schedule(cfg.adam.base_lr, b, cfg.halving_period);
        adam_step(model.params_mut().tensors_mut(), buf.grads(), &mut state, &cfg.adam, lr)?;
    }
    let accuracy = accuracy(&model, test)?;
    Ok(Recognizer { model, accuracy })
}

/// SHA-256 over labels, shapes and pixel bytes of a sample list.
pub fn dataset_checksum(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for &l in &s.labels {
            h.update((l as u64).to_le_bytes());
        }
        for &d in s.image.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in s.image.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentCounts {
    pub generated: usize,
    pub filtered_out: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationReport {
    pub counts: AugmentCounts,
    pub original_train_size: usize,
    pub synthesized_train_size: usize,
    pub test_size: usize,
    pub test_checksum: String,
    pub original_accuracy: f64,
    pub synthesized_accuracy: f64,
    pub config: RecognizerConfig,
}

impl AugmentationReport {
    pub fn validate(&self) -> Result<()> {
        let c = self.counts;
        let acc_ok = |a: f64| (0.0..=1.0).contains(&a);
        if c.kept + c.filtered_out != c.generated
            || !acc_ok(self.original_accuracy)
            || !acc_ok(self.synthesized_accuracy)
        {
            return Err(GcnError::Contract(format!("inconsistent report {self:?}")));
        }
        Ok(())
    }
}

/// Train one recognizer per arm with identical settings and compare test
/// accuracy. Labels are `[class]`.
pub fn compare_augmentation(
    schema: &FeatureSchema,
    original: &[Sample],
    synthesized: &[Sample],
    test: &[Sample],
    counts: AugmentCounts,
    cfg: &RecognizerConfig,
) -> Result<AugmentationReport> {
    let checksum = dataset_checksum(test);
    let orig = train_recognizer(schema, original, test, cfg)?;
    let synth = train_recognizer(schema, synthesized, test, cfg)?;
    if dataset_checksum(test) != checksum {
        return Err(GcnError::Contract("test set changed between arms".into()));
    }
    let report = AugmentationReport {
        counts,
        original_train_size: original.len(),
        synthesized_train_size: synthesized.len(),
        test_size: test.len(),
        test_checksum: checksum,
        original_accuracy: orig.accuracy,
        synthesized_accuracy: synth.accuracy,
        config: cfg.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// Feature used for expression-only recognizer datasets.
pub fn expression_feature(expressions: usize) -> Feature {
    FeatureSchema::glyphs(2, expressions, false).features[1].clone()
}
