//! Comparison parsers: per-instance k-means on frame features, and a small
//! temporal convolution network that scores every frame as a boundary.

mod kmeans;
mod tcn;

pub use kmeans::{kmeans, kmeans_parse, within_cluster_ss, KMeans};
pub use tcn::{
    boundary_targets, pick_peaks, tcn_parse, tcn_train, TcnModel, TcnTrainConfig,
};
