//! Annotation and feature files, dataset directories, statistics and the
//! synthetic generator.
//!
//! A dataset directory holds `annotations.jsonl`, one `features/<id>.fseq`
//! per instance and, for generated data, `prototypes.fseq`.

mod annotations;
mod features;
mod predictions;
mod stats;
mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

pub use annotations::{
    load_annotations, parse_annotations, save_annotations, write_annotations, AnnotationRecord, Split,
};
pub use features::{
    decode_features, encode_features, load_features, round_to_f32, save_features, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use predictions::{
    load_predictions, parse_predictions, save_predictions, write_predictions, Prediction,
};
pub use stats::{compute_dataset_stats, position_bin, ClassStats, DatasetStats, HISTOGRAM_BINS};
pub use synth::{action_name, generate_synthetic, SynthConfig, SynthDataset};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::TrainInstance;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_DIR: &str = "features";
pub const PROTOTYPES_FILE: &str = "prototypes.fseq";
/// Environment variable naming the default dataset directory.
pub const DATA_DIR_ENV: &str = "TAPKIT_DATA_DIR";

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{id}.fseq"))
}

/// Records with their features, in annotation-file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    pub features: Vec<Matrix>,
}

impl Dataset {
    pub fn new(records: Vec<AnnotationRecord>, features: Vec<Matrix>) -> Result<Self> {
        if records.len() != features.len() {
            return Err(Error::Input(format!(
                "{} records but {} feature sequences",
                records.len(),
                features.len()
            )));
        }
        let mut width = None;
        for (r, x) in records.iter().zip(&features) {
            if x.rows() != r.length {
                return Err(Error::Validation(format!(
                    "instance {}: {} feature frames but length {}",
                    r.id,
                    x.rows(),
                    r.length
                )));
            }
            if *width.get_or_insert(x.cols()) != x.cols() {
                return Err(Error::Validation(format!(
                    "instance {} has feature width {}, expected {}",
                    r.id,
                    x.cols(),
                    width.unwrap()
                )));
            }
        }
        Ok(Self { records, features })
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.first().map(Matrix::cols)
    }

    /// Sorted distinct action labels.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Training instances of one split, labelled by position in `classes`.
    pub fn train_instances(&self, split: Split, classes: &[String]) -> Result<Vec<TrainInstance>> {
        self.indices(split)
            .into_iter()
            .map(|i| {
                let r = &self.records[i];
                let label = classes
                    .iter()
                    .position(|c| c == &r.label)
                    .ok_or_else(|| Error::Validation(format!("unknown class {:?}", r.label)))?;
                Ok(TrainInstance {
                    features: self.features[i].clone(),
                    segmentation: r.segmentation(),
                    label,
                })
            })
            .collect()
    }
}

impl From<SynthDataset> for Dataset {
    fn from(s: SynthDataset) -> Self {
        Self {
            records: s.records,
            features: s.features,
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let records = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let features = records
        .iter()
        .map(|r| load_features(&feature_path(dir, &r.id)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, features)
}

pub fn save_dataset(dir: &Path, ds: &Dataset, prototypes: Option<&Matrix>) -> Result<()> {
    let fdir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    save_annotations(&dir.join(ANNOTATIONS_FILE), &ds.records)?;
    for (r, x) in ds.records.iter().zip(&ds.features) {
        save_features(&feature_path(dir, &r.id), x)?;
    }
    if let Some(p) = prototypes {
        save_features(&dir.join(PROTOTYPES_FILE), p)?;
    }
    Ok(())
}
