//! The train / estimate / adapt pipeline with evaluation and diagnostics.

mod adapt;
mod config;
mod diagnostics;
mod metrics;
mod report;
mod train;

pub use adapt::{adapt_source_free, AdaptationReport, StepRecord};
pub use config::{ExperimentConfig, CONFIG_KEYS};
pub use diagnostics::{
    compute_bound_diagnostics, estimate_distance, BoundDiagnostics, DistanceEstimate,
    SourceSummary, DIAG_PSEUDO_POINTS, EXACT_POINTS, EXACT_RESAMPLES, SLICED_POINTS,
};
pub use metrics::{
    confusion_matrix, evaluate_miou, infer, iou_from_confusion, miou_from_predictions, Inference,
    IouReport,
};
pub use report::*;
pub use train::{architecture, init_model, train_source, SourceRun};

use crate::datasets::LabeledImages;
use crate::error::Result;
use crate::gmm::{
    build_support_sets, estimate_gmm, generate_pseudo_dataset, EstimateOptions, PrototypicalGmm,
    PseudoDataset,
};
use crate::nn::SegModel;
use crate::rng::Rng;

/// Random stream ids; every consumer of randomness owns one so that adding
/// draws in one place never shifts another.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const SOURCE_BATCH: u64 = 2;
    pub const TARGET_BATCH: u64 = 3;
    pub const PSEUDO: u64 = 4;
    pub const SLICES: u64 = 5;
    pub const DIAG_PSEUDO: u64 = 6;
    pub const DIAG_DISTANCE: u64 = 7;
}

/// Pseudo-samples used by the distance diagnostics; fixed by the seed.
pub fn diagnostic_pseudo_set(
    cfg: &ExperimentConfig,
    gmm: &PrototypicalGmm,
    model: &SegModel<f32>,
) -> Result<PseudoDataset> {
    generate_pseudo_dataset(
        gmm,
        model,
        DIAG_PSEUDO_POINTS,
        cfg.tau_filter,
        &mut Rng::with_stream(cfg.seed, streams::DIAG_PSEUDO),
        cfg.max_draw_factor,
    )
}

/// Fit the prototype mixture on confident source pixels and record what the
/// later diagnostics need from the source side.
pub fn estimate_prototypes(
    cfg: &ExperimentConfig,
    model: &SegModel<f32>,
    source: &LabeledImages,
) -> Result<(PrototypicalGmm, SourceSummary)> {
    let inf = infer(model, &source.images, cfg.threads)?;
    let support = build_support_sets(&inf.embeddings, &source.labels, &inf.probs, cfg.tau_fit)?;
    let opts = EstimateOptions {
        unbiased: cfg.unbiased_cov,
    };
    let gmm = estimate_gmm(&inf.embeddings, &support, opts)?;
    let e_source = miou_from_predictions(&inf.predictions, &source.labels, model.num_classes())?.error_rate();
    let pseudo = diagnostic_pseudo_set(cfg, &gmm, model)?;
    let mut rng = Rng::with_stream(cfg.seed, streams::DIAG_DISTANCE);
    let w_sp = estimate_distance(&inf.embeddings, &pseudo.z, cfg.num_projections, &mut rng)?;
    Ok((
        gmm,
        SourceSummary {
            w_sp,
            e_source,
            n_source: inf.embeddings.rows(),
        },
    ))
}
