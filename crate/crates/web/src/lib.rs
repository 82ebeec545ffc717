//! Browser bindings. Every export takes and returns plain numbers, strings
//! or byte buffers, so the same functions run under native tests.

use gcn_core::data::synth::canonical_glyphs;
use gcn_core::data::Sample;
use gcn_core::layers::{deconv_chain as chain, DeconvSpec};
use gcn_core::train::{mean_pixel_loss, BatchSampler, CooperativeTrainer, TrainConfig};
use gcn_core::{lr_schedule, AdamHyper, ClassifierSpec, FeatureSchema, GeneratorSpec, Tensor};
use wasm_bindgen::prelude::*;

const RESOLUTION: usize = 28;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Spatial sizes through `layers` identical transposed convolutions.
#[wasm_bindgen]
pub fn deconv_sizes(
    size_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    layers: usize,
) -> Result<Vec<u32>, String> {
    if layers > 16 {
        return Err("at most 16 layers".into());
    }
    let stack = vec![(stride, kernel, pad); layers];
    let sizes = chain(size_in, &stack).map_err(err)?;
    sizes
        .into_iter()
        .map(|s| u32::try_from(s).map_err(|_| format!("size {s} overflows")))
        .collect()
}

/// Learning rate sampled at `points` evenly spaced batch indices in `0..batches`.
#[wasm_bindgen]
pub fn lr_curve(base_lr: f64, halving_period: usize, batches: usize, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let b = i * batches.saturating_sub(1) / (points - 1);
            lr_schedule(base_lr, b, halving_period)
        })
        .collect()
}

fn tiny_generator(schema: FeatureSchema) -> GeneratorSpec {
    let deconv = [(16, 8), (8, 3)]
        .iter()
        .map(|&(in_channels, out_channels)| DeconvSpec {
            in_channels,
            out_channels,
            kernel_size: 4,
            stride: 2,
            pad: 1,
        })
        .collect();
    GeneratorSpec {
        embed_dims: [16, 16],
        trunk_dims: [64, 16 * 7 * 7],
        seed_shape: [16, 7, 7],
        deconv,
        target_size: [RESOLUTION, RESOLUTION],
        ..GeneratorSpec::desk(schema)
    }
}

fn to_rgba(image: &Tensor<f32>) -> Vec<u8> {
    let [_, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            out.push(gcn_core::data::netpbm::to_byte(d[c * plane + i]));
        }
        out.push(255);
    }
    out
}

/// A small generator/classifier pair trained in the page on procedural glyphs.
#[wasm_bindgen]
pub struct GlyphLab {
    trainer: CooperativeTrainer,
    sampler: BatchSampler,
    samples: Vec<Sample>,
    identities: usize,
    expressions: usize,
}

#[wasm_bindgen]
impl GlyphLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, identities: usize, expressions: usize) -> Result<GlyphLab, String> {
        if !(2..=8).contains(&identities) || !(1..=5).contains(&expressions) {
            return Err("identities must be 2..=8 and expressions 1..=5".into());
        }
        let seed = u64::from(seed);
        let schema = FeatureSchema::glyphs(identities, expressions, false);
        let samples = canonical_glyphs(seed, identities, expressions, RESOLUTION).map_err(err)?;
        let adam = AdamHyper {
            base_lr: 0.001,
            ..AdamHyper::faces()
        };
        let config = TrainConfig {
            batch_size: 8,
            total_batches: usize::MAX,
            halving_period: 1000,
            gen_adam: adam,
            cls_adam: adam,
            seed,
            ..TrainConfig::default()
        };
        let sampler = BatchSampler::new(samples.len(), config.batch_size, seed).map_err(err)?;
        let trainer = CooperativeTrainer::from_specs(
            tiny_generator(schema.clone()),
            ClassifierSpec::desk(schema),
            config,
        )
        .map_err(err)?;
        Ok(GlyphLab {
            trainer,
            sampler,
            samples,
            identities,
            expressions,
        })
    }

    /// Run `steps` cooperative updates; returns the last batch pixel loss.
    pub fn train(&mut self, steps: usize) -> Result<f64, String> {
        let mut last = f64::NAN;
        for _ in 0..steps {
            let idx = self.sampler.batch(self.trainer.batches_done());
            let batch: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
            last = self.trainer.train_step(&batch).map_err(err)?.pixel_loss;
        }
        Ok(last)
    }

    pub fn batches(&self) -> usize {
        self.trainer.batches_done()
    }

    pub fn identities(&self) -> usize {
        self.identities
    }

    pub fn expressions(&self) -> usize {
        self.expressions
    }

    pub fn resolution(&self) -> usize {
        RESOLUTION
    }

    pub fn expression_name(&self, expression: usize) -> String {
        self.trainer.gen.schema().features[1].class_name(expression)
    }

    /// Mean squared pixel error over the whole training set.
    pub fn pixel_loss(&self) -> Result<f64, String> {
        mean_pixel_loss(&self.trainer.gen, &self.samples).map_err(err)
    }

    /// Training image as RGBA bytes.
    pub fn real_rgba(&self, identity: usize, expression: usize) -> Result<Vec<u8>, String> {
        if identity >= self.identities || expression >= self.expressions {
            return Err("class out of range".into());
        }
        Ok(to_rgba(&self.samples[identity * self.expressions + expression].image))
    }

    /// Generated image for identity weights `alpha` on `a` and `1 - alpha` on
    /// `b`, as RGBA bytes.
    pub fn blend_rgba(&self, a: usize, b: usize, alpha: f64, expression: usize) -> Result<Vec<u8>, String> {
        if a >= self.identities || b >= self.identities || expression >= self.expressions {
            return Err("class out of range".into());
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err("alpha must lie in [0, 1]".into());
        }
        let mut id = vec![0.0; self.identities];
        id[a] += alpha;
        id[b] += 1.0 - alpha;
        let mut ex = vec![0.0; self.expressions];
        ex[expression] = 1.0;
        let feats = [
            Tensor::from_f64([1, self.identities], &id).map_err(err)?,
            Tensor::from_f64([1, self.expressions], &ex).map_err(err)?,
        ];
        let out = self.trainer.gen.generate(&feats).map_err(err)?;
        let image = out.index_axis0(0).map_err(err)?;
        Ok(to_rgba(&image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deconv_sizes_follow_the_formula() {
        assert_eq!(deconv_sizes(8, 4, 2, 0, 4).unwrap(), vec![8, 18, 38, 78, 158]);
        assert_eq!(deconv_sizes(7, 4, 2, 1, 2).unwrap(), vec![7, 14, 28]);
        assert!(deconv_sizes(1, 1, 1, 1, 1).is_err());
        assert!(deconv_sizes(7, 4, 2, 1, 17).is_err());
    }

    #[test]
    fn lr_curve_halves_on_schedule() {
        let c = lr_curve(0.0002, 1000, 3001, 4);
        assert_eq!(c, vec![0.0002, 0.0001, 0.00005, 0.000025]);
        assert_eq!(lr_curve(1.0, 10, 1, 3), vec![1.0; 3]);
    }

    #[test]
    fn lab_renders_and_learns() {
        let mut lab = GlyphLab::new(3, 3, 2).unwrap();
        let px = RESOLUTION * RESOLUTION * 4;
        assert_eq!(lab.real_rgba(2, 1).unwrap().len(), px);
        let img = lab.blend_rgba(0, 1, 0.5, 1).unwrap();
        assert_eq!(img.len(), px);
        assert!(img.chunks(4).all(|p| p[3] == 255));
        assert!(lab.blend_rgba(0, 3, 0.5, 0).is_err());
        assert!(lab.blend_rgba(0, 1, 1.5, 0).is_err());
        assert_eq!(lab.expression_name(0), "neutral");

        let before = lab.pixel_loss().unwrap();
        let last = lab.train(150).unwrap();
        assert!(last.is_finite());
        assert_eq!(lab.batches(), 150);
        let after = lab.pixel_loss().unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn lab_is_deterministic() {
        let mut a = GlyphLab::new(5, 2, 2).unwrap();
        let mut b = GlyphLab::new(5, 2, 2).unwrap();
        a.train(5).unwrap();
        b.train(5).unwrap();
        assert_eq!(a.blend_rgba(0, 1, 0.3, 1).unwrap(), b.blend_rgba(0, 1, 0.3, 1).unwrap());
    }

    #[test]
    fn bad_lab_shapes_are_rejected() {
        assert!(GlyphLab::new(0, 1, 2).is_err());
        assert!(GlyphLab::new(0, 9, 2).is_err());
        assert!(GlyphLab::new(0, 2, 0).is_err());
    }
}
