//! Metrics, multi-clip inference, embedding-continuity diagnostics, and
//! input-gradient saliency.

mod continuity;
mod metrics;
mod predict;
mod saliency;

pub use continuity::{knn_label_mae, triplet_violation_rate, ContinuityReport};
pub use metrics::{classification_metrics, regression_metrics, MetricReport};
pub use predict::{
    embed_records, evaluate_split, export_embeddings, multiclip_predict, predict_records,
    LabelNorm,
};
pub use saliency::input_saliency;
