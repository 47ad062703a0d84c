use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

use super::annotations::{AnnotationRecord, Split};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub instances: usize,
    pub avg_boundaries: f64,
    pub per_split: BTreeMap<Split, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub instances: usize,
    pub classes: BTreeMap<String, ClassStats>,
    /// Boundary counts by relative position `b / T`, in 20 equal bins.
    pub position_histogram: [usize; HISTOGRAM_BINS],
}

impl DatasetStats {
    pub fn position_density(&self) -> [f64; HISTOGRAM_BINS] {
        let total: usize = self.position_histogram.iter().sum();
        let mut out = [0.0; HISTOGRAM_BINS];
        if total > 0 {
            for (o, &c) in out.iter_mut().zip(&self.position_histogram) {
                *o = c as f64 / total as f64;
            }
        }
        out
    }

    pub fn largest_class(&self) -> Option<(&str, usize)> {
        self.classes
            .iter()
            .map(|(k, v)| (k.as_str(), v.instances))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0)))
    }
}

pub fn position_bin(boundary: usize, length: usize) -> usize {
    (HISTOGRAM_BINS * boundary / length).min(HISTOGRAM_BINS - 1)
}

pub fn compute_dataset_stats(records: &[AnnotationRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::Input("no records to summarise".into()));
    }
    let mut hist = [0usize; HISTOGRAM_BINS];
    let mut acc: BTreeMap<String, (usize, usize, BTreeMap<Split, usize>)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.label.clone()).or_default();
        e.0 += 1;
        e.1 += r.boundaries.len();
        *e.2.entry(r.split).or_default() += 1;
        for &b in &r.boundaries {
            hist[position_bin(b, r.length)] += 1;
        }
    }
    let classes = acc
        .into_iter()
        .map(|(label, (n, b, per_split))| {
            (
                label,
                ClassStats {
                    instances: n,
                    avg_boundaries: b as f64 / n as f64,
                    per_split,
                },
            )
        })
        .collect();
    Ok(DatasetStats {
        instances: records.len(),
        classes,
        position_histogram: hist,
    })
}
