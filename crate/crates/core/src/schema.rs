use serde::{Deserialize, Serialize};

use crate::error::{GcnError, Result};

fn default_weight() -> f64 {
    10.0
}

/// One categorical conditioning feature (identity, expression, color, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    pub name: String,
    pub cardinality: usize,
    /// Weight of this feature's cross-entropy term.
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Optional class names; when empty, classes are addressed by index.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
}

impl Feature {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Feature {
            name: name.into(),
            cardinality,
            weight: default_weight(),
            classes: Vec::new(),
        }
    }

    pub fn with_classes(name: impl Into<String>, classes: &[&str]) -> Self {
        Feature {
            name: name.into(),
            cardinality: classes.len(),
            weight: default_weight(),
            classes: classes.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn class_name(&self, idx: usize) -> String {
        self.classes
            .get(idx)
            .cloned()
            .unwrap_or_else(|| idx.to_string())
    }

    /// Resolve a class by name or by decimal index.
    pub fn class_index(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.classes.iter().position(|c| c == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.cardinality => Ok(i),
            _ => Err(GcnError::Schema(format!(
                "unknown class {key:?} for feature {:?}",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
}

pub const COLOR_NAMES: [&str; 3] = ["red", "green", "blue"];
pub const ROTATION_NAMES: [&str; 4] = ["rot0", "rot90", "rot180", "rot270"];
pub const TRANSFORM_NAMES: [&str; 8] = [
    "rot0", "rot90", "rot180", "rot270", "rot0m", "rot90m", "rot180m", "rot270m",
];
pub const EXPRESSION_NAMES: [&str; 7] = [
    "neutral", "aversion", "happy", "surprise", "sad", "angry", "afraid",
];

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let s = FeatureSchema { features };
        s.validate()?;
        Ok(s)
    }

    /// Digits conditioned on class, color and quarter-turn rotation.
    pub fn digits() -> Self {
        let digits: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        let digit_refs: Vec<&str> = digits.iter().map(String::as_str).collect();
        FeatureSchema {
            features: vec![
                Feature::with_classes("digit", &digit_refs),
                Feature::with_classes("color", &COLOR_NAMES),
                Feature::with_classes("rotation", &ROTATION_NAMES),
            ],
        }
    }

    /// Identity x expression glyphs, optionally with the 8-element transform
    /// feature.
    pub fn glyphs(identities: usize, expressions: usize, with_transform: bool) -> Self {
        let ids: Vec<String> = (0..identities).map(|i| format!("p{i}")).collect();
        let exprs: Vec<String> = (0..expressions)
            .map(|e| {
                EXPRESSION_NAMES
                    .get(e)
                    .map_or_else(|| format!("expr{e}"), |s| s.to_string())
            })
            .collect();
        let mut features = vec![
            Feature::with_classes("identity", &ids.iter().map(String::as_str).collect::<Vec<_>>()),
            Feature::with_classes(
                "expression",
                &exprs.iter().map(String::as_str).collect::<Vec<_>>(),
            ),
        ];
        if with_transform {
            features.push(Feature::with_classes("transform", &TRANSFORM_NAMES));
        }
        FeatureSchema { features }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(GcnError::Schema("schema needs at least one feature".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.cardinality < 2 {
                return Err(GcnError::Schema(format!(
                    "feature {:?} has cardinality {} (< 2)",
                    f.name, f.cardinality
                )));
            }
            if !(f.weight >= 0.0) {
                return Err(GcnError::Schema(format!(
                    "feature {:?} has negative weight {}",
                    f.name, f.weight
                )));
            }
            if !f.classes.is_empty() && f.classes.len() != f.cardinality {
                return Err(GcnError::Schema(format!(
                    "feature {:?} lists {} class names for cardinality {}",
                    f.name,
                    f.classes.len(),
                    f.cardinality
                )));
            }
            if self.features[..i].iter().any(|g| g.name == f.name) {
                return Err(GcnError::Schema(format!("duplicate feature {:?}", f.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.cardinality).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| GcnError::Schema(format!("no feature named {name:?}")))
    }

    pub fn feature(&self, name: &str) -> Result<&Feature> {
        Ok(&self.features[self.index_of(name)?])
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.features.len() {
            return Err(GcnError::Schema(format!(
                "{} labels for {} features",
                labels.len(),
                self.features.len()
            )));
        }
        for (f, &l) in self.features.iter().zip(labels) {
            if l >= f.cardinality {
                return Err(GcnError::Label(format!(
                    "label {l} out of range for feature {:?} (K = {})",
                    f.name, f.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Copy of the schema with every feature weight replaced.
    pub fn with_uniform_weight(mut self, w: f64) -> Self {
        for f in &mut self.features {
            f.weight = w;
        }
        self
    }
}
