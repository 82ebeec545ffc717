//! Samples, feature encoding, and dataset construction.

pub mod idx;
pub mod manifest;
pub mod netpbm;
pub mod synth;
pub mod transform;

use crate::error::{GcnError, Result};
use crate::schema::FeatureSchema;
use crate::tensor::{Scalar, Tensor};

pub use manifest::{build_dataset, holdout_split, split_indices, DatasetManifest, DatasetSource, HoldoutRule, SampleRecord};
pub use transform::{apply_transform, colorize, Transform};

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// One class index per schema feature.
    pub labels: Vec<usize>,
    pub source: String,
}

impl Sample {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        schema.check_labels(&self.labels)?;
        if self.image.rank() != 3 {
            return Err(GcnError::shape(format!(
                "sample {:?}: image must be [C, H, W], got {:?}",
                self.source,
                self.image.shape()
            )));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(GcnError::Contract(format!(
                "sample {:?}: pixels outside [0, 1]",
                self.source
            )));
        }
        Ok(())
    }
}

/// One one-hot vector per feature.
pub fn encode_features<T: Scalar>(labels: &[usize], schema: &FeatureSchema) -> Result<Vec<Vec<T>>> {
    schema.check_labels(labels)?;
    Ok(schema
        .features
        .iter()
        .zip(labels)
        .map(|(f, &l)| {
            let mut v = vec![T::zero(); f.cardinality];
            v[l] = T::one();
            v
        })
        .collect())
}

/// Argmax of each vector; the inverse of [`encode_features`].
pub fn decode_features<T: Scalar>(vectors: &[Vec<T>]) -> Vec<usize> {
    vectors
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Batched one-hot inputs: one `[batch, K_f]` tensor per feature.
pub fn feature_batch<T: Scalar>(labels: &[&[usize]], schema: &FeatureSchema) -> Result<Vec<Tensor<T>>> {
    if labels.is_empty() {
        return Err(GcnError::Contract("empty batch".into()));
    }
    for l in labels {
        schema.check_labels(l)?;
    }
    schema
        .features
        .iter()
        .enumerate()
        .map(|(f, feat)| {
            let k = feat.cardinality;
            let mut data = vec![T::zero(); labels.len() * k];
            for (i, l) in labels.iter().enumerate() {
                data[i * k + l[f]] = T::one();
            }
            Tensor::new([labels.len(), k], data)
        })
        .collect()
}

/// Stack sample images into `[batch, C, H, W]`.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_identity_two_of_seventy() {
        let schema = FeatureSchema::glyphs(70, 4, false);
        let v = encode_features::<f32>(&[2, 3], &schema).unwrap();
        assert_eq!(v[0].len(), 70);
        assert_eq!(v[0][2], 1.0);
        assert_eq!(v[0].iter().sum::<f32>(), 1.0);
        assert_eq!(decode_features(&v), vec![2, 3]);
        assert!(matches!(
            encode_features::<f32>(&[70, 0], &schema),
            Err(GcnError::Label(_))
        ));
    }

    #[test]
    fn batches_have_expected_shapes() {
        let schema = FeatureSchema::digits();
        let a = [1usize, 2, 3];
        let b = [9usize, 0, 0];
        let t = feature_batch::<f32>(&[&a, &b], &schema).unwrap();
        assert_eq!(t.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>(), vec![vec![2, 10], vec![2, 3], vec![2, 4]]);
        assert_eq!(t[0].data()[10 + 9], 1.0);
        assert_eq!(t[2].sum(), 2.0);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(d in 0usize..10, c in 0usize..3, r in 0usize..4) {
            let schema = FeatureSchema::digits();
            let v = encode_features::<f64>(&[d, c, r], &schema).unwrap();
            for vec in &v {
                prop_assert!(vec.iter().all(|&x| x >= 0.0));
                prop_assert_eq!(vec.iter().sum::<f64>(), 1.0);
            }
            prop_assert_eq!(decode_features(&v), vec![d, c, r]);
        }
    }
}
