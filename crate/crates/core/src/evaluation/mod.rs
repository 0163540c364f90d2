//! Classifier, restoration metrics, transfer matrices, the embedding atlas
//! and the ablation trace.

pub mod ablation;
pub mod atlas;
pub mod classifier;
pub mod metrics;

pub use ablation::{ablation_trace, end_mean, AblationTrace, TracePoint};
pub use atlas::{embedding_atlas, AtlasPoint, AtlasReport, LabelStats};
pub use classifier::{train_classifier, ClassifierConfig, ConceptClassifier, ACCURACY_GATE};
pub use metrics::{
    build_transfer_matrix, column_seed, total_variation, AccuracyCell, Attack, AttackInput, AttackInputs, AttackRow,
    EvalModel, Evaluator, ModelColumn, TransferMatrix,
};
