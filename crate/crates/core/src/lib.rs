//! Learning classifiers from webly labeled multimodal data.
//!
//! Pseudo labels inferred from metadata are noisy. Training weights each
//! positive-labeled sample by how easy it currently looks: samples whose loss
//! falls below a per-class age receive weight `1 - loss / age`, the rest are
//! ignored. The age tracks a percentile of recently seen losses, so the
//! fraction of used samples follows a schedule. With several modalities, the
//! loss that decides the weight is taken on a vote over the modality
//! classifiers, and the same weight is applied to every modality.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod mmco;
pub mod models;
pub mod pseudolabel;
pub mod selfpaced;
pub mod training;

pub use dataset::{
    load_dataset, make_concat_modality, minibatch_iterator, save_dataset, synth_generate, GroundTruth,
    ModalityDescriptor, ModalityRole, MultimodalDataset, SampleOrigin, SynthConfig, SynthDataset, CONCAT,
};
pub use error::{Error, ErrorClass, Result};
pub use eval::{
    average_precision, easiness_scores, easiness_split_report, mean_average_precision, modality_ablation, noise_sweep,
    precision_at_k, selection_metrics, top_k_retrieval, EasinessReport, SelectionReport,
};
pub use matrix::Matrix;
pub use mmco::{consensus_weight, consensus_weights_batch, vote, VotingScheme};
pub use models::{
    adam_step, finite_difference_check, init_params, load_model, predict, save_model, weighted_gradient, AdamConfig,
    AdamState, ClassifierParams, ModelFile, ModelKind,
};
pub use pseudolabel::{label_dataset, match_concept, PseudoLabelMatrix};
pub use selfpaced::{advance_schedule, compute_sample_weight, AgeSchedule, AgeState, WeightMatrix};
pub use training::{
    objective_value, train_batch_well, train_mmco, train_online_well, train_plain, EpochReport, TrainConfig,
    TrainerState, TrainingData,
};
