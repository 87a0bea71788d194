//! Segmentation metrics, embedding analysis and report files.

mod embed;
mod metrics;
mod report;

pub use embed::{
    export_embeddings, pca_2d, patient_cluster_purity, read_embeddings_csv, shuffled_purity,
    write_embeddings_csv, EmbeddingSet,
};
pub use metrics::{dice, per_class_dice, DiceReport};
pub use report::{
    emit_report, plot_embeddings, read_results_csv, read_summary_csv, summarize, write_results_csv,
    write_summary_csv, SummaryRow,
};
