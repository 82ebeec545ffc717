//! Dataset manifests and hold-out splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GcnError, Result};
use crate::schema::FeatureSchema;

use super::synth::{canonical_glyph_range, expand_digit, synth_digits, synth_glyph_range};
use super::{idx, netpbm, Sample};

fn default_resolution() -> usize {
    28
}

fn all_colors() -> Vec<usize> {
    vec![0, 1, 2]
}

fn all_rotations() -> Vec<usize> {
    vec![0, 1, 2, 3]
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn yes() -> bool {
    true
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Procedural face-like glyphs.
    Glyphs {
        identities: usize,
        expressions: usize,
        #[serde(default = "default_resolution")]
        resolution: usize,
        /// Include all eight transforms as a third feature.
        #[serde(default = "yes")]
        transforms: bool,
        /// Render identities starting here (labels stay 0-based).
        #[serde(default, skip_serializing_if = "is_zero")]
        first_identity: usize,
    },
    /// Procedural stroke-font digits.
    Digits {
        variants_per_digit: usize,
        #[serde(default = "all_colors")]
        colors: Vec<usize>,
        #[serde(default = "all_rotations")]
        rotations: Vec<usize>,
        #[serde(default = "default_resolution")]
        resolution: usize,
    },
    /// An IDX image/label pair; the first `per_digit` images of each class
    /// in file order are kept.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        per_digit: usize,
        #[serde(default = "all_colors")]
        colors: Vec<usize>,
        #[serde(default = "all_rotations")]
        rotations: Vec<usize>,
    },
    /// Netpbm files listed in the manifest records, relative to `root`
    /// (itself relative to the manifest's directory).
    Files { root: PathBuf },
}

impl DatasetSource {
    pub fn schema(&self, files_schema: Option<&FeatureSchema>) -> Result<FeatureSchema> {
        match self {
            DatasetSource::Glyphs {
                identities,
                expressions,
                transforms,
                ..
            } => Ok(FeatureSchema::glyphs(*identities, *expressions, *transforms)),
            DatasetSource::Digits { .. } | DatasetSource::Idx { .. } => Ok(FeatureSchema::digits()),
            DatasetSource::Files { .. } => files_schema
                .cloned()
                .ok_or_else(|| GcnError::Config("a files dataset needs an explicit schema".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub source: String,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
}

/// A conjunction of `feature -> class` constraints. Classes may be named or
/// given by index. A sample matching any rule is held out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct HoldoutRule(pub BTreeMap<String, String>);

/// Class keys may be written as JSON numbers (`"digit": 2`).
#[derive(Deserialize)]
#[serde(untagged)]
enum ClassKey {
    Name(String),
    Index(u64),
}

impl<'de> Deserialize<'de> for HoldoutRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, ClassKey>::deserialize(d)?;
        Ok(HoldoutRule(
            raw.into_iter()
                .map(|(k, v)| match v {
                    ClassKey::Name(s) => (k, s),
                    ClassKey::Index(i) => (k, i.to_string()),
                })
                .collect(),
        ))
    }
}

impl HoldoutRule {
    pub fn new<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        HoldoutRule(pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }

    /// Resolve to `(feature index, class index)` pairs.
    pub fn resolve(&self, schema: &FeatureSchema) -> Result<Vec<(usize, usize)>> {
        self.0
            .iter()
            .map(|(f, c)| {
                let fi = schema.index_of(f)?;
                Ok((fi, schema.features[fi].class_index(c)?))
            })
            .collect()
    }
}

/// Indices of `(train, holdout)` under `rules`.
pub fn split_indices(
    schema: &FeatureSchema,
    labels: &[&[usize]],
    rules: &[HoldoutRule],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let resolved = rules
        .iter()
        .map(|r| r.resolve(schema))
        .collect::<Result<Vec<_>>>()?;
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (i, l) in labels.iter().enumerate() {
        let held = resolved
            .iter()
            .any(|rule| rule.iter().all(|&(f, c)| l.get(f) == Some(&c)));
        if held {
            hold.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() && !labels.is_empty() {
        return Err(GcnError::Config("hold-out rules leave the training set empty".into()));
    }
    Ok((train, hold))
}

/// Partition samples into `(train, holdout)`.
pub fn holdout_split(
    schema: &FeatureSchema,
    samples: Vec<Sample>,
    rules: &[HoldoutRule],
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let labels: Vec<&[usize]> = samples.iter().map(|s| s.labels.as_slice()).collect();
    let (_, hold) = split_indices(schema, &labels, rules)?;
    let mut held = vec![false; samples.len()];
    for i in hold {
        held[i] = true;
    }
    let (h, t): (Vec<_>, Vec<_>) = samples.into_iter().zip(held).partition(|(_, h)| *h);
    Ok((
        t.into_iter().map(|(s, _)| s).collect(),
        h.into_iter().map(|(s, _)| s).collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: FeatureSchema,
    pub source: DatasetSource,
    pub records: Vec<SampleRecord>,
    #[serde(default)]
    pub holdout_rules: Vec<HoldoutRule>,
    pub seed: u64,
}

fn record_of(s: &Sample, schema: &FeatureSchema) -> SampleRecord {
    let transform = schema
        .index_of("transform")
        .or_else(|_| schema.index_of("rotation"))
        .ok()
        .map(|f| schema.features[f].class_name(s.labels[f]));
    SampleRecord {
        source: s.source.clone(),
        labels: s.labels.clone(),
        transform,
    }
}

fn check_indices(what: &str, values: &[usize], bound: usize) -> Result<()> {
    match values.iter().find(|&&v| v >= bound) {
        Some(v) => Err(GcnError::Config(format!("{what} index {v} out of range 0..{bound}"))),
        None if values.is_empty() => Err(GcnError::Config(format!("{what} list is empty"))),
        None => Ok(()),
    }
}

/// Materialize a generated or IDX-backed source. `base` resolves relative
/// paths.
pub fn build_dataset(
    source: &DatasetSource,
    seed: u64,
    holdout_rules: Vec<HoldoutRule>,
    base: &Path,
) -> Result<(DatasetManifest, Vec<Sample>)> {
    let schema = source.schema(None)?;
    let samples = match source {
        DatasetSource::Glyphs {
            identities,
            expressions,
            resolution,
            transforms,
            first_identity,
        } => {
            if *transforms {
                synth_glyph_range(seed, *first_identity, *identities, *expressions, *resolution)?
            } else {
                canonical_glyph_range(seed, *first_identity, *identities, *expressions, *resolution)?
            }
        }
        DatasetSource::Digits {
            variants_per_digit,
            colors,
            rotations,
            resolution,
        } => {
            check_indices("color", colors, 3)?;
            check_indices("rotation", rotations, 4)?;
            synth_digits(seed, *variants_per_digit, colors, rotations, *resolution)?
        }
        DatasetSource::Idx {
            images,
            labels,
            per_digit,
            colors,
            rotations,
        } => {
            check_indices("color", colors, 3)?;
            check_indices("rotation", rotations, 4)?;
            let (imgs, labs) = idx::load_idx(base.join(images), base.join(labels))?;
            let mut taken = [0usize; 10];
            let mut out = Vec::new();
            for (i, &l) in labs.iter().enumerate() {
                let d = l as usize;
                if d > 9 {
                    return Err(GcnError::Label(format!("IDX label {l} at record {i} is not a digit")));
                }
                if taken[d] < *per_digit {
                    taken[d] += 1;
                    let grey = imgs.index_axis0(i)?;
                    expand_digit(&grey, d, colors, rotations, &format!("idx/{i}"), &mut out)?;
                }
            }
            out
        }
        DatasetSource::Files { .. } => {
            return Err(GcnError::Config(
                "a files dataset is loaded from its manifest, not built".into(),
            ))
        }
    };
    let records = samples.iter().map(|s| record_of(s, &schema)).collect();
    let manifest = DatasetManifest {
        schema,
        source: source.clone(),
        records,
        holdout_rules,
        seed,
    };
    Ok((manifest, samples))
}

impl DatasetManifest {
    /// Manifest for samples written as netpbm files under `root`.
    pub fn for_files(schema: FeatureSchema, root: impl Into<PathBuf>, samples: &[Sample], seed: u64) -> Self {
        DatasetManifest {
            records: samples.iter().map(|s| record_of(s, &schema)).collect(),
            schema,
            source: DatasetSource::Files { root: root.into() },
            holdout_rules: Vec::new(),
            seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GcnError::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.schema.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| GcnError::io(path, e))?;
        Ok(())
    }

    /// Load every sample. Generated sources are rebuilt and checked against
    /// the records; file sources are read relative to `base`.
    pub fn samples(&self, base: &Path) -> Result<Vec<Sample>> {
        let samples = match &self.source {
            DatasetSource::Files { root } => {
                let dir = base.join(root);
                self.records
                    .iter()
                    .map(|r| {
                        self.schema.check_labels(&r.labels)?;
                        Ok(Sample {
                            image: netpbm::load(dir.join(&r.source))?,
                            labels: r.labels.clone(),
                            source: r.source.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            src => {
                let (rebuilt, samples) = build_dataset(src, self.seed, Vec::new(), base)?;
                if rebuilt.records != self.records {
                    return Err(GcnError::Schema(
                        "manifest records do not match the regenerated dataset".into(),
                    ));
                }
                samples
            }
        };
        Ok(samples)
    }

    /// `(train, holdout)` under the manifest's own rules.
    pub fn split(&self, samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
        holdout_split(&self.schema, samples, &self.holdout_rules)
    }
}
