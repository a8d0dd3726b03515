//! A trained classifier bundled with the vocabulary and relation settings it
//! was trained under, and its JSON file format.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    build_feature_vector, encode_model_input, feature_length, model_input_dim, Category,
    ClassVocabulary, Detection, FeatureVector, TrainingSet,
};
use crate::geometry::RelationConfig;
use crate::mlp::NetworkParams;
use crate::scg::{train_scg, TrainConfig, TrainReport};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const INPUT_ENCODING: &str = "context_features+label_one_hot";

#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    pub vocab: ClassVocabulary,
    pub relations: RelationConfig,
    pub seed: u64,
    pub network: NetworkParams,
}

impl ContextModel {
    pub fn new(
        vocab: ClassVocabulary,
        relations: RelationConfig,
        seed: u64,
        network: NetworkParams,
    ) -> Result<Self> {
        relations.validate()?;
        network.validate()?;
        let expected = model_input_dim(&relations, vocab.len());
        if network.input_dim() != expected {
            return Err(Error::Dimension {
                expected,
                actual: network.input_dim(),
            });
        }
        Ok(Self {
            vocab,
            relations,
            seed,
            network,
        })
    }

    pub fn train(
        set: &TrainingSet,
        vocab: &ClassVocabulary,
        relations: &RelationConfig,
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainReport)> {
        let flen = feature_length(relations, vocab.len());
        if set.feature_dim() != flen {
            return Err(Error::Dimension {
                expected: flen,
                actual: set.feature_dim(),
            });
        }
        let x = set.model_inputs(vocab.len());
        let (network, report) = train_scg(x.view(), &set.labels, cfg)?;
        let model = Self::new(vocab.clone(), relations.clone(), cfg.seed, network)?;
        Ok((model, report))
    }

    pub fn feature_length(&self) -> usize {
        feature_length(&self.relations, self.vocab.len())
    }

    pub fn score_features(&self, features: &FeatureVector, class_id: usize) -> Result<f64> {
        self.vocab.check(class_id)?;
        self.network
            .score(&encode_model_input(features.as_slice(), class_id, self.vocab.len()))
    }

    /// Scores detection `idx` of a scene as if it carried `class_id` with
    /// detector confidence `confidence`; every other detection keeps its label.
    pub fn score_as(
        &self,
        dets: &[Detection],
        idx: usize,
        class_id: usize,
        confidence: f64,
    ) -> Result<f64> {
        let mut reference = dets[idx].clone();
        reference.class_id = class_id;
        reference.confidence = confidence;
        let others = dets.iter().enumerate().filter(|(j, _)| *j != idx).map(|(_, d)| d);
        let fv = build_feature_vector(&reference, others, &self.relations, self.vocab.len())?;
        self.score_features(&fv, class_id)
    }

    /// Score of every detection against the rest of its scene.
    pub fn score_scene(&self, dets: &[Detection]) -> Result<Vec<f64>> {
        (0..dets.len())
            .map(|i| self.score_as(dets, i, dets[i].class_id, dets[i].confidence))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            metadata: ModelMetadata {
                vocab: self.vocab.categories().to_vec(),
                relations: self.relations.clone(),
                hidden: self.network.hidden(),
                input_dim: self.network.input_dim(),
                feature_length: self.feature_length(),
                input_encoding: INPUT_ENCODING.to_string(),
                seed: self.seed,
            },
            weights: Weights {
                w1: self.network.w1.iter().copied().collect(),
                b1: self.network.b1.to_vec(),
                w2: self.network.w2.iter().copied().collect(),
                b2: self.network.b2.to_vec(),
            },
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::parse(
                "model",
                format!("unsupported format_version {}", doc.format_version),
            ));
        }
        let m = doc.metadata;
        if m.input_encoding != INPUT_ENCODING {
            return Err(Error::parse("model", format!("unknown input_encoding {:?}", m.input_encoding)));
        }
        let (h, d) = (m.hidden, m.input_dim);
        let shape_err = |what: &str| Error::parse("model", format!("{what} has the wrong length"));
        let network = NetworkParams {
            w1: Array2::from_shape_vec((h, d), doc.weights.w1).map_err(|_| shape_err("w1"))?,
            b1: Array1::from(doc.weights.b1),
            w2: Array2::from_shape_vec((2, h), doc.weights.w2).map_err(|_| shape_err("w2"))?,
            b2: Array1::from(doc.weights.b2),
        };
        let vocab = ClassVocabulary::new(m.vocab)?;
        let model = Self::new(vocab, m.relations, m.seed, network)?;
        if model.feature_length() != m.feature_length {
            return Err(Error::parse("model", "feature_length disagrees with relations and vocab"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format_version: u32,
    metadata: ModelMetadata,
    weights: Weights,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMetadata {
    vocab: Vec<Category>,
    relations: RelationConfig,
    hidden: usize,
    input_dim: usize,
    feature_length: usize,
    input_encoding: String,
    seed: u64,
}

/// Row-major weight blocks.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Weights {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, RelationFamily};
    use crate::mlp::init_network;

    fn model() -> ContextModel {
        let vocab = ClassVocabulary::synthetic(3);
        let rel = RelationConfig::only(&[RelationFamily::Cooccurrence, RelationFamily::Scale]);
        let dim = model_input_dim(&rel, 3);
        ContextModel::new(vocab, rel, 5, init_network(dim, 4, 5).unwrap()).unwrap()
    }

    #[test]
    fn json_round_trip_is_value_identical() {
        let m = model();
        let text = m.to_json().unwrap();
        let back = ContextModel::from_json(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let vocab = ClassVocabulary::synthetic(3);
        let err = ContextModel::new(vocab, RelationConfig::all(), 0, init_network(7, 2, 0).unwrap());
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let text = model().to_json().unwrap().replace("\"format_version\":1", "\"format_version\":9");
        assert!(ContextModel::from_json(&text).is_err());
    }

    #[test]
    fn scene_scores_are_probabilities() {
        let m = model();
        let dets = vec![
            Detection::new(1, 0, BBox::new(0., 0., 10., 10.).unwrap(), 0.9),
            Detection::new(1, 2, BBox::new(30., 0., 5., 5.).unwrap(), 0.6),
        ];
        let s = m.score_scene(&dets).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.score_as(&dets, 0, 7, 0.5).is_err());
    }
}
