//! Synthetic image-text-box data generation and the grounding kernels used
//! to train on and evaluate it: attention-mask consistency losses, GradCAM,
//! the pointing game, box selection and text statistics.

pub mod amc;
pub mod analysis;
pub mod backend;
pub mod boxes;
pub mod canonical;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod text;

pub use amc::{l_amc, l_max, l_mean, AmcConfig, LossWithGrad};
pub use backend::{Backend, BackendError, MockBackend};
pub use boxes::{iou, select_top1_box, Detection, TextBoxItem, TextBoxPool};
pub use error::{Error, Result};
pub use eval::{pointing_accuracy, pointing_hit, EvalReport, EvalSample};
pub use explain::{gradcam, upsample_bilinear, ActivationStack};
pub use model::{
    rasterize_box, BBox, BoxMask, DatasetManifest, GroundingPhrase, GroundingRecord, Heatmap,
    ImageRef, Paradigm, PhraseSource, PipelineKind, StageTraceEntry,
};
pub use pipeline::{PipelineConfig, RunOutcome};
