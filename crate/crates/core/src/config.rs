//! Experiment configuration: one JSON document describes a run.
//!
//! Parsing is strict (unknown keys are errors, reported with their key path)
//! and command-line overrides address keys by dotted path, e.g.
//! `train.batch_size=16` or `holdout.0.digit="3"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::RecognizerConfig;
use crate::data::{DatasetSource, HoldoutRule};
use crate::error::{GcnError, Result};
use crate::models::{ClassifierArch, ClassifierSpec, GeneratorArch, GeneratorSpec, Scale};
use crate::optim::AdamHyper;
use crate::schema::FeatureSchema;
use crate::train::TrainConfig;

/// Environment variable naming the directory relative output paths resolve
/// against.
pub const OUTPUT_ROOT_ENV: &str = "GCN_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Digits,
    Glyphs,
}

fn half() -> f64 {
    0.5
}

fn default_filter_feature() -> String {
    "expression".into()
}

fn default_recognizer() -> RecognizerConfig {
    RecognizerConfig::new(Scale::Desk.classifier_arch(), 0)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Blend generation, filtering and the recognizer comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSettings {
    #[serde(default = "half")]
    pub alpha: f64,
    /// Minimum classifier probability of the intended class.
    #[serde(default = "half")]
    pub threshold: f64,
    /// Classifier head the filter reads and the recognizer learns.
    #[serde(default = "default_filter_feature")]
    pub feature: String,
    /// Train the synthesized arm on original and synthesized images together.
    #[serde(default)]
    pub include_original: bool,
    #[serde(default = "default_recognizer")]
    pub recognizer: RecognizerConfig,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            alpha: half(),
            threshold: half(),
            feature: default_filter_feature(),
            include_original: false,
            recognizer: default_recognizer(),
        }
    }
}

impl AugmentSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(GcnError::Config(format!("augment.alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(GcnError::Config(format!(
                "augment.threshold {} must lie in [0, 1]",
                self.threshold
            )));
        }
        let r = &self.recognizer;
        if r.batch_size == 0 || r.halving_period == 0 {
            return Err(GcnError::Config(
                "augment.recognizer batch_size and halving_period must be >= 1".into(),
            ));
        }
        r.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub dataset_seed: u64,
    /// Required for `files` datasets; otherwise it must agree with the
    /// schema the dataset implies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<FeatureSchema>,
    /// Per-feature loss weight overrides by feature name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub feature_weights: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holdout: Vec<HoldoutRule>,
    pub generator: GeneratorArch,
    pub classifier: ClassifierArch,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentSettings,
    /// Relative paths resolve against the output root.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse and validate a JSON document.
    pub fn parse(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(path_error)?;
        de.end().map_err(|e| GcnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(path_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides::<&str>(path, &[])
    }

    /// Load, apply `key.path=value` overrides in order, then validate.
    pub fn load_with_overrides<S: AsRef<str>>(path: impl AsRef<Path>, overrides: &[S]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GcnError::io(path, e))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| GcnError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o.as_ref())?;
        }
        Self::from_value(doc).map_err(|e| match e {
            GcnError::Config(m) => GcnError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| GcnError::io(path, e))
    }

    /// Dataset schema with weight overrides applied.
    pub fn schema(&self) -> Result<FeatureSchema> {
        let mut schema = match (&self.dataset, &self.schema) {
            (DatasetSource::Files { .. }, s) => self.dataset.schema(s.as_ref())?,
            (_, None) => self.dataset.schema(None)?,
            (_, Some(s)) => {
                let implied = self.dataset.schema(None)?;
                let shape = |f: &FeatureSchema| {
                    f.features
                        .iter()
                        .map(|x| (x.name.clone(), x.cardinality))
                        .collect::<Vec<_>>()
                };
                if shape(s) != shape(&implied) {
                    return Err(GcnError::Config(format!(
                        "schema {:?} disagrees with the dataset's {:?}",
                        shape(s),
                        shape(&implied)
                    )));
                }
                s.clone()
            }
        };
        for (name, &w) in &self.feature_weights {
            let i = schema
                .index_of(name)
                .map_err(|_| GcnError::Config(format!("feature_weights: no feature named {name:?}")))?;
            schema.features[i].weight = w;
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        Ok(self.generator.clone().with_schema(self.schema()?))
    }

    pub fn classifier_spec(&self) -> Result<ClassifierSpec> {
        Ok(self.classifier.clone().with_schema(self.schema()?))
    }

    pub fn validate(&self) -> Result<()> {
        let consistent = matches!(
            (self.task, &self.dataset),
            (_, DatasetSource::Files { .. })
                | (Task::Glyphs, DatasetSource::Glyphs { .. })
                | (Task::Digits, DatasetSource::Digits { .. } | DatasetSource::Idx { .. })
        );
        if !consistent {
            return Err(GcnError::Config(format!(
                "task {:?} cannot use this dataset kind",
                self.task
            )));
        }
        let schema = self.schema()?;
        for rule in &self.holdout {
            rule.resolve(&schema)?;
        }
        let gen = self.generator_spec()?;
        gen.validate()?;
        let cls = self.classifier_spec()?;
        cls.validate()?;
        let produced = [gen.output_channels(), gen.target_size[0], gen.target_size[1]];
        if produced != cls.input_shape {
            return Err(GcnError::Geometry(format!(
                "generator produces {produced:?} images, classifier expects {:?}",
                cls.input_shape
            )));
        }
        if let Some(res) = self.dataset_resolution() {
            if [res, res] != gen.target_size {
                return Err(GcnError::Geometry(format!(
                    "dataset resolution {res} does not match generator target {:?}",
                    gen.target_size
                )));
            }
        }
        self.train.validate()?;
        self.augment.validate()?;
        if self.task == Task::Glyphs {
            schema.index_of(&self.augment.feature).map_err(|_| {
                GcnError::Config(format!("augment.feature: no feature named {:?}", self.augment.feature))
            })?;
        }
        Ok(())
    }

    fn dataset_resolution(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Glyphs { resolution, .. } | DatasetSource::Digits { resolution, .. } => {
                Some(*resolution)
            }
            DatasetSource::Idx { .. } | DatasetSource::Files { .. } => None,
        }
    }

    /// `output_dir` if absolute, else joined onto `root` (or the current
    /// directory).
    pub fn resolve_output_dir(&self, root: Option<&Path>) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            root.unwrap_or(Path::new(".")).join(&self.output_dir)
        }
    }

    /// Face-scale expression transfer: 70 identities, 4 expressions, all
    /// 8 transforms, 158x158 RGB.
    pub fn faces() -> Self {
        ExperimentConfig {
            task: Task::Glyphs,
            dataset: DatasetSource::Glyphs {
                identities: 70,
                expressions: 4,
                resolution: 158,
                transforms: true,
                first_identity: 0,
            },
            dataset_seed: 0,
            schema: None,
            feature_weights: BTreeMap::new(),
            holdout: Vec::new(),
            generator: Scale::Face.generator_arch(),
            classifier: Scale::Face.classifier_arch(),
            train: TrainConfig::default(),
            augment: AugmentSettings {
                recognizer: RecognizerConfig::new(Scale::Face.classifier_arch(), 0),
                ..AugmentSettings::default()
            },
            output_dir: PathBuf::from("runs/faces"),
        }
    }

    /// Face-scale augmentation: 65 identities x 5 expressions, untransformed.
    pub fn face_augmentation() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Glyphs {
                identities: 65,
                expressions: 5,
                resolution: 158,
                transforms: false,
                first_identity: 0,
            },
            output_dir: PathBuf::from("runs/face_augmentation"),
            ..Self::faces()
        }
    }

    /// Color/rotation digits from IDX files with the red 2 held out.
    pub fn digits() -> Self {
        let adam = AdamHyper::digits();
        ExperimentConfig {
            task: Task::Digits,
            dataset: DatasetSource::Idx {
                images: PathBuf::from("data/train-images-idx3-ubyte"),
                labels: PathBuf::from("data/train-labels-idx1-ubyte"),
                per_digit: 100,
                colors: vec![0, 1, 2],
                rotations: vec![0, 1, 2, 3],
            },
            dataset_seed: 0,
            schema: None,
            feature_weights: BTreeMap::new(),
            holdout: vec![red_two()],
            generator: Scale::Digit.generator_arch(),
            classifier: Scale::Digit.classifier_arch(),
            train: TrainConfig {
                gen_adam: adam,
                cls_adam: adam,
                ..TrainConfig::default()
            },
            augment: AugmentSettings::default(),
            output_dir: PathBuf::from("runs/digits"),
        }
    }

    /// Procedural digits at desk scale: one variant per digit, 3 colors,
    /// upright, red 2 held out.
    pub fn desk_digits() -> Self {
        let adam = AdamHyper::digits();
        ExperimentConfig {
            dataset: DatasetSource::Digits {
                variants_per_digit: 1,
                colors: vec![0, 1, 2],
                rotations: vec![0],
                resolution: 28,
            },
            generator: Scale::Desk.generator_arch(),
            classifier: Scale::Desk.classifier_arch(),
            train: TrainConfig {
                batch_size: 16,
                total_batches: 2000,
                gen_adam: adam,
                cls_adam: adam,
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("runs/desk_digits"),
            ..Self::digits()
        }
    }

    /// Glyph augmentation at desk scale: 10 identities x 4 expressions.
    pub fn desk_glyphs() -> Self {
        ExperimentConfig {
            task: Task::Glyphs,
            dataset: DatasetSource::Glyphs {
                identities: 10,
                expressions: 4,
                resolution: 28,
                transforms: false,
                first_identity: 0,
            },
            dataset_seed: 0,
            schema: None,
            feature_weights: BTreeMap::new(),
            holdout: Vec::new(),
            generator: Scale::Desk.generator_arch(),
            classifier: Scale::Desk.classifier_arch(),
            train: TrainConfig {
                batch_size: 16,
                total_batches: 4000,
                ..TrainConfig::default()
            },
            augment: AugmentSettings::default(),
            output_dir: PathBuf::from("runs/desk_glyphs"),
        }
    }

    /// Digit-scale networks for 200 batches on ten red digits.
    pub fn smoke_digits() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Digits {
                variants_per_digit: 1,
                colors: vec![0],
                rotations: vec![0],
                resolution: 28,
            },
            holdout: Vec::new(),
            train: TrainConfig {
                batch_size: 4,
                total_batches: 200,
                ..Self::digits().train
            },
            output_dir: PathBuf::from("runs/smoke_digits"),
            ..Self::digits()
        }
    }

    /// The named presets, as shipped in `configs/`.
    pub fn presets() -> Vec<(&'static str, Self)> {
        vec![
            ("faces", Self::faces()),
            ("face_augmentation", Self::face_augmentation()),
            ("digits", Self::digits()),
            ("desk_digits", Self::desk_digits()),
            ("desk_glyphs", Self::desk_glyphs()),
            ("smoke_digits", Self::smoke_digits()),
        ]
    }
}

fn red_two() -> HoldoutRule {
    HoldoutRule::new([("digit", "2"), ("color", "red"), ("rotation", "rot0")])
}

fn path_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> GcnError {
    let path = e.path().to_string();
    if path == "." || path.is_empty() {
        GcnError::Config(e.into_inner().to_string())
    } else {
        GcnError::Config(format!("at `{path}`: {}", e.into_inner()))
    }
}

/// Apply one `dotted.key.path=value` assignment. The value is parsed as
/// JSON when possible and taken as a string otherwise. Missing object keys
/// are created (strict parsing later rejects unknown ones); array indices
/// must exist.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GcnError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(GcnError::Config(format!("override key {path:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        let here = keys[..=depth].join(".");
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let len = items.len();
                let slot = key
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| {
                        GcnError::Config(format!("override `{here}`: no element {key} in an array of {len}"))
                    })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(GcnError::Config(format!(
                    "override `{here}`: parent is not an object or array"
                )))
            }
        };
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for (name, cfg) in ExperimentConfig::presets() {
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = cfg.to_json().unwrap();
            assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn committed_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (name, cfg) in ExperimentConfig::presets() {
            let loaded = ExperimentConfig::load(dir.join(format!("{name}.json"))).unwrap();
            assert_eq!(loaded, cfg, "{name}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let mut doc = serde_json::to_value(ExperimentConfig::desk_glyphs()).unwrap();
        doc["train"]["batch_sise"] = 3.into();
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(err.contains("train") && err.contains("batch_sise"), "{err}");

        let mut doc = serde_json::to_value(ExperimentConfig::desk_glyphs()).unwrap();
        doc["train"]["gen_adam"]["base_lr"] = "fast".into();
        let err = ExperimentConfig::from_value(doc).unwrap_err().to_string();
        assert!(err.contains("train.gen_adam.base_lr"), "{err}");
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut doc = serde_json::to_value(ExperimentConfig::desk_digits()).unwrap();
        apply_override(&mut doc, "train.batch_size=8").unwrap();
        apply_override(&mut doc, "holdout.0.digit=3").unwrap();
        apply_override(&mut doc, "output_dir=elsewhere").unwrap();
        apply_override(&mut doc, "feature_weights.color=2.5").unwrap();
        let cfg = ExperimentConfig::from_value(doc.clone()).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.holdout[0].0["digit"], "3");
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.schema().unwrap().feature("color").unwrap().weight, 2.5);

        assert!(apply_override(&mut doc, "holdout.5.digit=1").is_err());
        assert!(apply_override(&mut doc, "train.batch_size.x=1").is_err());
        assert!(apply_override(&mut doc, "no_equals").is_err());
        assert!(apply_override(&mut doc, "train..seed=1").is_err());
        apply_override(&mut doc, "trian.seed=1").unwrap();
        assert!(ExperimentConfig::from_value(doc).is_err());
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = ExperimentConfig::desk_glyphs();
        cfg.task = Task::Digits;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_glyphs();
        cfg.classifier = Scale::Face.classifier_arch();
        assert!(matches!(cfg.validate(), Err(GcnError::Geometry(_))));

        let mut cfg = ExperimentConfig::desk_glyphs();
        cfg.feature_weights.insert("colour".into(), 1.0);
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_digits();
        cfg.holdout = vec![HoldoutRule::new([("digit", "11")])];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_glyphs();
        cfg.dataset = DatasetSource::Files { root: "imgs".into() };
        assert!(cfg.validate().is_err());
        cfg.schema = Some(FeatureSchema::glyphs(10, 4, false));
        cfg.validate().unwrap();

        let mut cfg = ExperimentConfig::desk_glyphs();
        cfg.schema = Some(FeatureSchema::glyphs(11, 4, false));
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_glyphs();
        cfg.augment.alpha = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_dir_resolves_against_root() {
        let cfg = ExperimentConfig::desk_glyphs();
        assert_eq!(
            cfg.resolve_output_dir(Some(Path::new("/tmp/x"))),
            PathBuf::from("/tmp/x/runs/desk_glyphs")
        );
        let cfg = ExperimentConfig {
            output_dir: PathBuf::from("/abs"),
            ..cfg
        };
        assert_eq!(cfg.resolve_output_dir(Some(Path::new("/tmp/x"))), PathBuf::from("/abs"));
    }

    proptest! {
        #[test]
        fn train_section_round_trips(
            bs in 1usize..512,
            total in 1usize..100_000,
            halving in 1usize..5000,
            lr in 0.0f64..0.01,
            seed in any::<u64>(),
            real in any::<bool>(),
        ) {
            let mut cfg = ExperimentConfig::desk_digits();
            cfg.train.batch_size = bs;
            cfg.train.total_batches = total;
            cfg.train.halving_period = halving;
            cfg.train.gen_adam.base_lr = lr;
            cfg.train.seed = seed;
            cfg.train.classifier_sees_real = real;
            let back = ExperimentConfig::parse(&cfg.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
