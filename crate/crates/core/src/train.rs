//! Cooperative training of a generator and a multi-task classifier.
//!
//! Both networks minimize parts of one graph. The classifier objective is the
//! weighted sum of per-feature cross entropies on generated images; the
//! generator objective adds the pixel loss against the real image. The pixel
//! term has no path to classifier parameters, so one backward pass of the
//! generator objective yields the correct gradients for both networks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{GradBuffer, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{feature_batch, image_batch, Sample};
use crate::error::{GcnError, Result};
use crate::models::{ClassifierModel, GeneratorModel};
use crate::optim::{adam_step, lr_schedule, AdamHyper, AdamState};
use crate::schema::FeatureSchema;
use crate::tensor::{RngState, Tensor};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_STEPS: usize = 10;
/// A classification-to-pixel weight ratio at or above this is flagged.
pub const UNSTABLE_WEIGHT_RATIO: f64 = 100.0;

pub const GENERATOR_FILE: &str = "generator.gcn1";
pub const CLASSIFIER_FILE: &str = "classifier.gcn1";
pub const STATE_FILE: &str = "trainer_state.gcn1";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub features: Vec<f64>,
    pub pixel: f64,
}

impl LossWeights {
    pub fn from_schema(schema: &FeatureSchema, pixel: f64) -> Self {
        LossWeights {
            features: schema.features.iter().map(|f| f.weight).collect(),
            pixel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.features.iter().chain(std::iter::once(&self.pixel));
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(GcnError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.clone().all(|w| *w == 0.0) {
            return Err(GcnError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// True (and logged) when classification terms dominate the pixel term
    /// by [`UNSTABLE_WEIGHT_RATIO`] or more, a balance known to make both
    /// networks hard to converge.
    pub fn flag_unstable(&self) -> bool {
        let max_f = self.features.iter().copied().fold(0.0, f64::max);
        let unstable = self.pixel > 0.0 && max_f / self.pixel >= UNSTABLE_WEIGHT_RATIO;
        if unstable {
            log::warn!(
                "classification weight {max_f} vs pixel weight {} (ratio >= {UNSTABLE_WEIGHT_RATIO}) tends not to converge",
                self.pixel
            );
        }
        unstable
    }
}

/// `sum_f w_f * CE_f`, each CE averaged over the batch. Also returns the
/// unweighted per-feature CE nodes.
pub fn classifier_objective_terms(
    g: &mut Graph<f32>,
    logits: &[Var],
    labels: &[Vec<usize>],
    weights: &LossWeights,
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != labels.len() || logits.len() != weights.features.len() {
        return Err(GcnError::Schema(format!(
            "{} logit tensors, {} label columns, {} weights",
            logits.len(),
            labels.len(),
            weights.features.len()
        )));
    }
    let mut ces = Vec::with_capacity(logits.len());
    let mut total: Option<Var> = None;
    for ((&z, y), &w) in logits.iter().zip(labels).zip(&weights.features) {
        let ce = g.softmax_cross_entropy(z, y)?;
        ces.push(ce);
        let term = g.scale(ce, w);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| GcnError::Schema("no features".into()))?;
    Ok((total, ces))
}

pub fn classifier_objective(
    g: &mut Graph<f32>,
    logits: &[Var],
    labels: &[Vec<usize>],
    weights: &LossWeights,
) -> Result<Var> {
    classifier_objective_terms(g, logits, labels, weights).map(|(t, _)| t)
}

/// `pixel_weight * mse(synth, real) + classifier_objective`.
pub fn generator_objective(
    g: &mut Graph<f32>,
    synth: Var,
    real: Var,
    logits: &[Var],
    labels: &[Vec<usize>],
    weights: &LossWeights,
) -> Result<Var> {
    let mse = g.mse_pixel_loss(synth, real)?;
    let pix = g.scale(mse, weights.pixel);
    let cls = classifier_objective(g, logits, labels, weights)?;
    g.add(pix, cls)
}

fn default_batch_size() -> usize {
    64
}

fn default_total_batches() -> usize {
    40_000
}

fn default_halving_period() -> usize {
    1000
}

fn default_pixel_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_total_batches")]
    pub total_batches: usize,
    #[serde(default = "default_halving_period")]
    pub halving_period: usize,
    #[serde(default = "AdamHyper::faces")]
    pub gen_adam: AdamHyper,
    #[serde(default = "AdamHyper::faces")]
    pub cls_adam: AdamHyper,
    /// Feature weights come from the schema.
    #[serde(default = "default_pixel_weight")]
    pub pixel_weight: f64,
    /// Checkpoint every this many batches; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also train the classifier on real images (averaged with the
    /// generated-image objective).
    #[serde(default)]
    pub classifier_sees_real: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            total_batches: default_total_batches(),
            halving_period: default_halving_period(),
            gen_adam: AdamHyper::faces(),
            cls_adam: AdamHyper::faces(),
            pixel_weight: default_pixel_weight(),
            checkpoint_every: 0,
            seed: 0,
            classifier_sees_real: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_batches == 0 || self.halving_period == 0 {
            return Err(GcnError::Config(
                "batch_size, total_batches and halving_period must be >= 1".into(),
            ));
        }
        self.gen_adam.validate()?;
        self.cls_adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Zero-based index of the batch this step consumed.
    pub batch: usize,
    pub lr: f64,
    /// Unweighted pixel loss.
    pub pixel_loss: f64,
    /// Unweighted cross entropy per feature, on generated images.
    pub ce: Vec<f64>,
    pub generator_objective: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        self.pixel_loss.is_finite()
            && self.generator_objective.is_finite()
            && self.ce.iter().all(|c| c.is_finite())
    }

    pub fn csv_header(schema: &FeatureSchema) -> String {
        let mut h = String::from("batch,lr,pixel_loss");
        for f in &schema.features {
            let _ = write!(h, ",ce_{}", f.name);
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.batch, self.lr, self.pixel_loss);
        for c in &self.ce {
            let _ = write!(r, ",{c}");
        }
        r
    }
}

/// Deterministic batch order: the sample stream is the concatenation of
/// per-epoch permutations, each drawn from a stream forked by epoch index.
/// Batch `b` covers stream positions `b * batch_size ..`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    rng: RngState,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(GcnError::Config("dataset is empty".into()));
        }
        Ok(BatchSampler {
            n,
            batch_size,
            rng: RngState::new(seed).fork(0x5a4d_504c),
            cached: None,
        })
    }

    fn epoch(&mut self, e: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(e) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            self.rng.fork(e as u64).shuffle(&mut perm);
            self.cached = Some((e, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    pub fn batch(&mut self, b: usize) -> Vec<usize> {
        let start = b * self.batch_size;
        (start..start + self.batch_size)
            .map(|pos| {
                let n = self.n;
                self.epoch(pos / n)[pos % n]
            })
            .collect()
    }
}

pub struct CooperativeTrainer {
    pub gen: GeneratorModel<f32>,
    pub cls: ClassifierModel<f32>,
    pub config: TrainConfig,
    weights: LossWeights,
    gen_state: AdamState<f32>,
    cls_state: AdamState<f32>,
    gen_grads: GradBuffer<f32>,
    cls_grads: GradBuffer<f32>,
    /// Number of batches consumed so far.
    batch: usize,
}

impl CooperativeTrainer {
    pub fn new(gen: GeneratorModel<f32>, cls: ClassifierModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if gen.schema() != cls.schema() {
            return Err(GcnError::Schema(
                "generator and classifier use different feature schemas".into(),
            ));
        }
        let weights = LossWeights::from_schema(gen.schema(), config.pixel_weight);
        weights.validate()?;
        weights.flag_unstable();
        Ok(CooperativeTrainer {
            gen_state: AdamState::new(gen.params().tensors()),
            cls_state: AdamState::new(cls.params().tensors()),
            gen_grads: GradBuffer::for_params(gen.params().tensors()),
            cls_grads: GradBuffer::for_params(cls.params().tensors()),
            gen,
            cls,
            config,
            weights,
            batch: 0,
        })
    }

    /// Build both models from specs, seeded from `config.seed`.
    pub fn from_specs(
        gen_spec: crate::models::GeneratorSpec,
        cls_spec: crate::models::ClassifierSpec,
        config: TrainConfig,
    ) -> Result<Self> {
        let root = RngState::new(config.seed);
        let gen = GeneratorModel::build(gen_spec, &mut root.fork(1))?;
        let cls = ClassifierModel::build(cls_spec, &mut root.fork(2))?;
        Self::new(gen, cls, config)
    }

    pub fn batches_done(&self) -> usize {
        self.batch
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Fill the gradient buffers from one forward pass without updating
    /// parameters. Read them with [`Self::generator_grads`] and
    /// [`Self::classifier_grads`].
    pub fn compute_gradients(&mut self, batch: &[&Sample]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(GcnError::Contract("empty batch".into()));
        }
        let schema = self.gen.schema().clone();
        let labels: Vec<&[usize]> = batch.iter().map(|s| s.labels.as_slice()).collect();
        let columns: Vec<Vec<usize>> = (0..schema.len())
            .map(|f| labels.iter().map(|l| l[f]).collect())
            .collect();
        let feats = feature_batch::<f32>(&labels, &schema)?;
        let real = image_batch(batch)?;

        let mut g = Graph::new();
        let gp = self.gen.params().bind(&mut g);
        let cp = self.cls.params().bind(&mut g);
        let fv: Vec<Var> = feats.into_iter().map(|t| g.constant(t)).collect();
        let synth = self.gen.forward(&mut g, &gp, &fv)?;
        let real = g.constant(real);
        if g.value(synth).shape() != g.value(real).shape() {
            return Err(GcnError::shape(format!(
                "generated {:?} vs real {:?}",
                g.value(synth).shape(),
                g.value(real).shape()
            )));
        }
        let logits = self.cls.forward(&mut g, &cp, synth)?;
        let (cls_obj, ces) = classifier_objective_terms(&mut g, &logits, &columns, &self.weights)?;
        let mse = g.mse_pixel_loss(synth, real)?;
        let pix = g.scale(mse, self.weights.pixel);
        let gen_obj = g.add(pix, cls_obj)?;

        let metrics = StepMetrics {
            batch: self.batch,
            lr: lr_schedule(self.config.gen_adam.base_lr, self.batch, self.config.halving_period),
            pixel_loss: g.value(mse).item() as f64,
            ce: ces.iter().map(|&c| g.value(c).item() as f64).collect(),
            generator_objective: g.value(gen_obj).item() as f64,
        };
        if !metrics.is_finite() {
            return Err(GcnError::Divergence {
                batch: self.batch,
                detail: format!("non-finite loss: {metrics:?}"),
            });
        }

        let grads = g.backward(gen_obj)?;
        self.gen_grads.zero();
        self.gen_grads.accumulate(&grads, &gp)?;
        self.cls_grads.zero();
        if self.config.classifier_sees_real {
            let real_logits = self.cls.forward(&mut g, &cp, real)?;
            let real_obj = classifier_objective(&mut g, &real_logits, &columns, &self.weights)?;
            let both = g.add(cls_obj, real_obj)?;
            let cls_loss = g.scale(both, 0.5);
            let cls_grads = g.backward(cls_loss)?;
            self.cls_grads.accumulate(&cls_grads, &cp)?;
        } else {
            self.cls_grads.accumulate(&grads, &cp)?;
        }
        if !(self.gen_grads.max_abs().is_finite() && self.cls_grads.max_abs().is_finite()) {
            return Err(GcnError::Divergence {
                batch: self.batch,
                detail: format!("non-finite gradient: {metrics:?}"),
            });
        }
        Ok(metrics)
    }

    pub fn generator_grads(&self) -> &[Tensor<f32>] {
        self.gen_grads.grads()
    }

    pub fn classifier_grads(&self) -> &[Tensor<f32>] {
        self.cls_grads.grads()
    }

    /// One cooperative update on `batch`. On divergence no parameter moves
    /// but the batch counter still advances.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepMetrics> {
        let result = self.compute_gradients(batch);
        let idx = self.batch;
        self.batch += 1;
        let metrics = result?;
        let c = &self.config;
        let lr_g = lr_schedule(c.gen_adam.base_lr, idx, c.halving_period);
        let lr_c = lr_schedule(c.cls_adam.base_lr, idx, c.halving_period);
        adam_step(
            self.gen.params_mut().tensors_mut(),
            self.gen_grads.grads(),
            &mut self.gen_state,
            &c.gen_adam,
            lr_g,
        )?;
        adam_step(
            self.cls.params_mut().tensors_mut(),
            self.cls_grads.grads(),
            &mut self.cls_state,
            &c.cls_adam,
            lr_c,
        )?;
        Ok(metrics)
    }

    /// Train until `config.total_batches` batches have been consumed.
    /// `on_step` sees every finite step; checkpoints go to `out` when given.
    pub fn train_loop(
        &mut self,
        samples: &[Sample],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        let schema = self.gen.schema().clone();
        for s in samples {
            s.validate(&schema)?;
        }
        let mut sampler = BatchSampler::new(samples.len(), self.config.batch_size, self.config.seed)?;
        let mut bad_run = 0usize;
        while self.batch < self.config.total_batches {
            let idx = sampler.batch(self.batch);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            match self.train_step(&batch) {
                Ok(m) => {
                    bad_run = 0;
                    on_step(&m)?;
                    let every = self.config.checkpoint_every;
                    if let Some(dir) = out {
                        if every > 0 && self.batch % every == 0 && self.batch < self.config.total_batches {
                            self.save(dir)?;
                        }
                    }
                }
                Err(GcnError::Divergence { batch, detail }) => {
                    bad_run += 1;
                    log::warn!("batch {batch}: {detail}");
                    if bad_run >= MAX_NONFINITE_STEPS {
                        return Err(GcnError::Divergence {
                            batch,
                            detail: format!(
                                "{bad_run} consecutive non-finite steps; last checkpoint kept. {detail}"
                            ),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Write both models and the optimizer state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GcnError::io(dir, e))?;
        self.gen.save(dir.join(GENERATOR_FILE))?;
        self.cls.save(dir.join(CLASSIFIER_FILE))?;
        let mut ck = Checkpoint::new(json!({
            "kind": "trainer_state",
            "batch": self.batch,
            "gen_t": self.gen_state.t,
            "cls_t": self.cls_state.t,
            "config": self.config,
        }));
        for (tag, st) in [("gen", &self.gen_state), ("cls", &self.cls_state)] {
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                ck.push(format!("{tag}.m.{i}"), m);
                ck.push(format!("{tag}.v.{i}"), v);
            }
        }
        ck.save(dir.join(STATE_FILE))
    }

    /// Restore a run saved by [`CooperativeTrainer::save`]. `config` replaces
    /// the stored one (e.g. to extend `total_batches`).
    pub fn resume(dir: &Path, config: TrainConfig) -> Result<Self> {
        let gen = GeneratorModel::load(dir.join(GENERATOR_FILE))?;
        let cls = ClassifierModel::load(dir.join(CLASSIFIER_FILE))?;
        let mut t = Self::new(gen, cls, config)?;
        let mut ck = Checkpoint::load(dir.join(STATE_FILE))?;
        let get = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| GcnError::Schema(format!("trainer state lacks {k:?}")))
        };
        let (batch, gen_t, cls_t) = (get("batch")?, get("gen_t")?, get("cls_t")?);
        for (tag, st) in [("gen", &mut t.gen_state), ("cls", &mut t.cls_state)] {
            for i in 0..st.m.len() {
                st.m[i] = ck.take(&format!("{tag}.m.{i}"))?;
                st.v[i] = ck.take(&format!("{tag}.v.{i}"))?;
            }
        }
        t.gen_state.t = gen_t;
        t.cls_state.t = cls_t;
        t.batch = batch as usize;
        Ok(t)
    }
}

/// Mean per-image squared L2 distance between generated and real images.
pub fn mean_pixel_loss(gen: &GeneratorModel<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GcnError::Contract("no samples".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let labels: Vec<&[usize]> = chunk.iter().map(|s| s.labels.as_slice()).collect();
        let out = gen.generate(&feature_batch(&labels, gen.schema())?)?;
        total += out.squared_distance(&image_batch(&refs)?)? as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Write a metrics CSV.
pub fn write_metrics_csv(path: &Path, schema: &FeatureSchema, rows: &[StepMetrics]) -> Result<()> {
    let mut s = StepMetrics::csv_header(schema);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| GcnError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_digits;
    use crate::models::{ClassifierSpec, GeneratorSpec};

    fn uniform_logits(g: &mut Graph<f32>, batch: usize, k: usize) -> Var {
        g.leaf(Tensor::zeros([batch, k]).unwrap())
    }

    #[test]
    fn uniform_logits_give_closed_form() {
        let mut g = Graph::new();
        let a = uniform_logits(&mut g, 3, 4);
        let b = uniform_logits(&mut g, 3, 70);
        let w = LossWeights {
            features: vec![10.0, 10.0],
            pixel: 1.0,
        };
        let obj = classifier_objective(&mut g, &[a, b], &[vec![0, 1, 3], vec![5, 69, 0]], &w).unwrap();
        let want = 10.0 * 4f64.ln() + 10.0 * 70f64.ln();
        assert!(((g.value(obj).item() as f64 - want) / want).abs() < 1e-6);
    }

    #[test]
    fn single_feature_reduces_to_cross_entropy() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_f64([2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap());
        let w = LossWeights {
            features: vec![1.0],
            pixel: 0.0,
        };
        let obj = classifier_objective(&mut g, &[z], &[vec![2, 0]], &w).unwrap();
        let ce = g.softmax_cross_entropy(z, &[2, 0]).unwrap();
        assert_eq!(g.value(obj).item(), g.value(ce).item());
        let zero = LossWeights {
            features: vec![0.0],
            pixel: 1.0,
        };
        let obj = classifier_objective(&mut g, &[z], &[vec![2, 0]], &zero).unwrap();
        assert_eq!(g.value(obj).item(), 0.0);
        assert!(classifier_objective(&mut g, &[z, z], &[vec![2, 0]], &w).is_err());
    }

    #[test]
    fn generator_objective_is_additive() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::from_f64([1, 1, 1, 2], &[0.5, 0.25]).unwrap());
        let r = g.constant(Tensor::from_f64([1, 1, 1, 2], &[0.0, 0.0]).unwrap());
        let z = g.leaf(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
        let w = LossWeights {
            features: vec![10.0],
            pixel: 1.0,
        };
        let total = generator_objective(&mut g, s, r, &[z], &[vec![1]], &w).unwrap();
        let mse = g.mse_pixel_loss(s, r).unwrap();
        let cls = classifier_objective(&mut g, &[z], &[vec![1]], &w).unwrap();
        let sum = g.value(mse).item() + g.value(cls).item();
        assert!((g.value(total).item() - sum).abs() <= 4.0 * f32::EPSILON * sum);

        let mut g = Graph::new();
        let s = g.leaf(Tensor::from_f64([1, 1, 1, 2], &[0.5, 0.25]).unwrap());
        let r = g.constant(Tensor::from_f64([1, 1, 1, 2], &[0.5, 0.25]).unwrap());
        let z = g.leaf(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
        let w = LossWeights {
            features: vec![0.0],
            pixel: 1.0,
        };
        let total = generator_objective(&mut g, s, r, &[z], &[vec![1]], &w).unwrap();
        assert_eq!(g.value(total).item(), 0.0);
    }

    #[test]
    fn weight_validation_and_instability_flag() {
        assert!(LossWeights { features: vec![0.0], pixel: 0.0 }.validate().is_err());
        assert!(LossWeights { features: vec![-1.0], pixel: 1.0 }.validate().is_err());
        assert!(LossWeights { features: vec![100.0, 1.0], pixel: 1.0 }.flag_unstable());
        assert!(!LossWeights { features: vec![10.0, 10.0], pixel: 1.0 }.flag_unstable());
    }

    fn tiny_setup(config: TrainConfig) -> (CooperativeTrainer, Vec<Sample>) {
        let schema = FeatureSchema::digits();
        let t = CooperativeTrainer::from_specs(GeneratorSpec::desk(schema.clone()), ClassifierSpec::desk(schema), config)
            .unwrap();
        let samples = synth_digits(0, 1, &[0, 1], &[0], 28).unwrap();
        (t, samples)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_batches: 6,
            gen_adam: AdamHyper::digits(),
            cls_adam: AdamHyper::digits(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut c = small_config();
        c.gen_adam.base_lr = 0.0;
        c.cls_adam.base_lr = 0.0;
        let (mut t, s) = tiny_setup(c);
        let (g0, c0) = (t.gen.params().clone(), t.cls.params().clone());
        let m = t.train_step(&[&s[0], &s[3]]).unwrap();
        assert_eq!(t.gen.params(), &g0);
        assert_eq!(t.cls.params(), &c0);
        assert_eq!(m.lr, 0.0);
        assert!(m.pixel_loss > 0.0 && m.ce.len() == 3);
    }

    #[test]
    fn gradient_routing() {
        let mut c = small_config();
        c.pixel_weight = 0.0;
        let (mut t, s) = tiny_setup(c);
        t.compute_gradients(&[&s[0], &s[5]]).unwrap();
        assert!(t.classifier_grads().iter().any(|g| g.max_abs() > 0.0));
        assert!(t.generator_grads().iter().any(|g| g.max_abs() > 0.0));

        let schema = FeatureSchema::digits().with_uniform_weight(0.0);
        let mut t = CooperativeTrainer::from_specs(
            GeneratorSpec::desk(schema.clone()),
            ClassifierSpec::desk(schema),
            small_config(),
        )
        .unwrap();
        t.compute_gradients(&[&s[0], &s[5]]).unwrap();
        assert!(t.classifier_grads().iter().all(|g| g.max_abs() == 0.0));
        assert!(t.generator_grads().iter().any(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn seeing_real_images_changes_only_classifier_gradients() {
        let (mut a, s) = tiny_setup(small_config());
        let (mut b, _) = tiny_setup(TrainConfig {
            classifier_sees_real: true,
            ..small_config()
        });
        let batch = [&s[1], &s[2]];
        a.compute_gradients(&batch).unwrap();
        b.compute_gradients(&batch).unwrap();
        assert_eq!(a.generator_grads(), b.generator_grads());
        assert_ne!(a.classifier_grads(), b.classifier_grads());
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epochs() {
        let mut a = BatchSampler::new(10, 4, 7).unwrap();
        let mut b = BatchSampler::new(10, 4, 7).unwrap();
        let first: Vec<usize> = (0..5).flat_map(|i| a.batch(i)).collect();
        assert_eq!(first, (0..5).flat_map(|i| b.batch(i)).collect::<Vec<_>>());
        let mut epoch0 = first[..10].to_vec();
        epoch0.sort();
        assert_eq!(epoch0, (0..10).collect::<Vec<_>>());
        assert_eq!(b.batch(3), first[12..16]);
        assert!(BatchSampler::new(0, 4, 0).is_err());
    }

    #[test]
    fn equal_seeds_give_identical_logs_and_resume_matches() {
        let run = |total: usize| {
            let (mut t, s) = tiny_setup(TrainConfig {
                total_batches: total,
                ..small_config()
            });
            let mut rows = Vec::new();
            t.train_loop(&s, None, |m| {
                rows.push(m.csv_row());
                Ok(())
            })
            .unwrap();
            (t, rows, s)
        };
        let (_, full, s) = run(6);
        let (_, again, _) = run(6);
        assert_eq!(full, again);

        let dir = tempfile::tempdir().unwrap();
        let (half, first, _) = run(3);
        half.save(dir.path()).unwrap();
        let mut resumed = CooperativeTrainer::resume(dir.path(), TrainConfig {
            total_batches: 6,
            ..small_config()
        })
        .unwrap();
        assert_eq!(resumed.batches_done(), 3);
        let mut rest = Vec::new();
        resumed
            .train_loop(&s, None, |m| {
                rest.push(m.csv_row());
                Ok(())
            })
            .unwrap();
        assert_eq!([first, rest].concat(), full);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut rng = RngState::new(0);
        let gen = GeneratorModel::build(GeneratorSpec::desk(FeatureSchema::digits()), &mut rng).unwrap();
        let cls = ClassifierModel::build(ClassifierSpec::desk(FeatureSchema::glyphs(3, 2, false)), &mut rng).unwrap();
        assert!(matches!(
            CooperativeTrainer::new(gen, cls, small_config()),
            Err(GcnError::Schema(_))
        ));
    }

    #[test]
    fn csv_format() {
        let m = StepMetrics {
            batch: 3,
            lr: 0.0001,
            pixel_loss: 1.5,
            ce: vec![0.25, 2.0],
            generator_objective: 0.0,
        };
        let schema = FeatureSchema::glyphs(2, 2, false);
        assert_eq!(StepMetrics::csv_header(&schema), "batch,lr,pixel_loss,ce_identity,ce_expression");
        assert_eq!(m.csv_row(), "3,0.0001,1.5,0.25,2");
    }
}
