//! Classification and clustering metrics, plus the embedding and metrics
//! text formats.

mod cluster;
mod f1;
mod io;
pub mod reference;

pub use cluster::{cluster_report, dbscan, homogeneity_completeness, standardize, ClusterReport, NOISE};
pub use f1::{f1_scores, F1Report, LabelScore};
pub use io::{
    embeddings_tsv, metrics_text, read_embeddings, read_metrics, write_embeddings, write_metrics, EmbeddingRow,
};
