//! Multimodal attributed graphs: data model, synthetic generator,
//! perturbations, and the on-disk dataset format.

mod io;
mod perturb;
mod synth;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

pub use io::{load, save};
pub use perturb::{corrupt_modality, inject_noise};
pub use synth::{
    census, generate, measure_alignment, measure_neighborhood_noise, measure_snr_int,
    same_class_edge_fraction, ModalityCensus, ModalitySpec, SyntheticSpec,
};

use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("modality {modality}: dimension {dim} is smaller than the class count {classes}")]
    DimTooSmall {
        modality: String,
        dim: usize,
        classes: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("node {0} appears in more than one split")]
    SplitOverlap(usize),
    #[error("split index {index} is outside a {nodes}-node graph")]
    SplitOutOfRange { index: usize, nodes: usize },
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("modality name {0:?} is not a valid file-name component")]
    InvalidName(String),
    #[error("graph has no stored class signals (not synthetic)")]
    NoSignals,
    #[error("label {label} at node {node} is out of range for {classes} classes")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        classes: usize,
    },
    #[error("{what}: expected {expected}, got {got}")]
    Inconsistent {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("malformed meta.json {}: {reason}", path.display())]
    MalformedMeta { path: PathBuf, reason: String },
    #[error("{}: expected {expected} bytes, found {got} (truncated or oversized)", path.display())]
    FeatureSize {
        path: PathBuf,
        expected: u64,
        got: u64,
    },
    #[error("{}:{line}: {reason}", path.display())]
    MalformedEdges {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn validate(&self, num_nodes: usize) -> Result<(), DataError> {
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if split.is_empty() {
                return Err(DataError::EmptySplit(name));
            }
        }
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= num_nodes {
                return Err(DataError::SplitOutOfRange {
                    index: i,
                    nodes: num_nodes,
                });
            }
            if !seen.insert(i) {
                return Err(DataError::SplitOverlap(i));
            }
        }
        Ok(())
    }
}

/// Multimodal attributed graph with a row-normalized symmetric adjacency.
///
/// Feature values are held at `f32` precision (stored widened to `f64`) so
/// that the on-disk format round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Mag {
    num_classes: usize,
    modalities: Vec<Modality>,
    features: Vec<Tensor>,
    labels: Vec<usize>,
    splits: Splits,
    adjacency: Arc<CsrMatrix>,
    signals: Option<Vec<Tensor>>,
}

pub(crate) fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Rounds every entry to the nearest `f32`.
pub(crate) fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same shape")
}

impl Mag {
    /// Validates and assembles a graph. `adjacency` is the raw symmetric
    /// structure; it is row-normalized here.
    pub fn new(
        num_classes: usize,
        modalities: Vec<Modality>,
        features: Vec<Tensor>,
        labels: Vec<usize>,
        splits: Splits,
        adjacency: &CsrMatrix,
        signals: Option<Vec<Tensor>>,
    ) -> Result<Self, DataError> {
        let n = labels.len();
        if modalities.len() != features.len() {
            return Err(DataError::Inconsistent {
                what: "feature matrices per modality".into(),
                expected: modalities.len(),
                got: features.len(),
            });
        }
        let mut names = HashSet::new();
        for (m, f) in modalities.iter().zip(&features) {
            if !valid_name(&m.name) || !names.insert(m.name.as_str()) {
                return Err(DataError::InvalidName(m.name.clone()));
            }
            if f.rows() != n || f.cols() != m.dim {
                return Err(DataError::Inconsistent {
                    what: format!("feature matrix {} size", m.name),
                    expected: n * m.dim,
                    got: f.rows() * f.cols(),
                });
            }
        }
        if let Some((node, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                node,
                label,
                classes: num_classes,
            });
        }
        splits.validate(n)?;
        if adjacency.num_rows() != n || adjacency.num_cols() != n {
            return Err(DataError::Inconsistent {
                what: "adjacency size".into(),
                expected: n,
                got: adjacency.num_rows(),
            });
        }
        if let Some(signals) = &signals {
            for (m, s) in modalities.iter().zip(signals) {
                if s.shape() != (num_classes, m.dim) {
                    return Err(DataError::Inconsistent {
                        what: format!("signal matrix {} size", m.name),
                        expected: num_classes * m.dim,
                        got: s.rows() * s.cols(),
                    });
                }
            }
        }
        Ok(Self {
            num_classes,
            modalities,
            features: features.iter().map(quantize).collect(),
            labels,
            splits,
            adjacency: Arc::new(adjacency.row_normalized()),
            signals: signals.map(|s| s.iter().map(quantize).collect()),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize, DataError> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| DataError::UnknownModality(name.to_string()))
    }

    pub fn features(&self, modality: usize) -> &Tensor {
        &self.features[modality]
    }

    pub fn all_features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Row-normalized (neighbor-mean) adjacency.
    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }

    /// Per-class signal vectors (`C x d_m`), present for synthetic graphs.
    pub fn signals(&self, modality: usize) -> Result<&Tensor, DataError> {
        self.signals
            .as_ref()
            .map(|s| &s[modality])
            .ok_or(DataError::NoSignals)
    }

    pub fn has_signals(&self) -> bool {
        self.signals.is_some()
    }

    /// Labels of the given nodes.
    pub fn labels_of(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().map(|&i| self.labels[i]).collect()
    }

    /// Copy with one modality's feature matrix replaced (quantized).
    pub(crate) fn with_features(&self, modality: usize, features: Tensor) -> Self {
        let mut out = self.clone();
        out.features[modality] = quantize(&features);
        out
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_valid() {
        let g = fixtures::tiny();
        assert_eq!(g.num_nodes(), 3);
        assert!(g.adjacency().is_normalized());
        assert_eq!(g.modality_index("image").unwrap(), 1);
        assert_eq!(
            g.modality_index("audio").unwrap_err(),
            DataError::UnknownModality("audio".into())
        );
        assert_eq!(g.signals(0).unwrap_err(), DataError::NoSignals);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let s = Splits {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        assert_eq!(s.validate(3), Err(DataError::SplitOverlap(1)));
        let s = Splits {
            train: vec![0],
            val: vec![],
            test: vec![2],
        };
        assert_eq!(s.validate(3), Err(DataError::EmptySplit("val")));
    }

    #[test]
    fn bad_names_rejected() {
        assert!(valid_name("feat-1_a"));
        assert!(!valid_name("../x"));
        assert!(!valid_name(""));
    }
}
