use super::config::ExperimentConfig;
use super::streams;
use crate::adam::{adam_step, AdamState};
use crate::autodiff::Tape;
use crate::datasets::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::{Architecture, SegModel};
use crate::rng::Rng;

/// Network shape used by the pipeline for `channels` inputs and `k` classes.
pub fn architecture(cfg: &ExperimentConfig, channels: usize, k: usize) -> Architecture {
    Architecture::desk_default(channels, k, cfg.neighborhood)
}

/// Freshly initialized model; the seed alone fixes its bytes.
pub fn init_model(cfg: &ExperimentConfig, arch: &Architecture) -> Result<SegModel<f32>> {
    SegModel::init(arch, &mut Rng::with_stream(cfg.seed, streams::INIT))
}

/// Source training output.
#[derive(Clone, Debug)]
pub struct SourceRun {
    pub model: SegModel<f32>,
    /// batch cross-entropy before each update
    pub losses: Vec<f64>,
}

impl SourceRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Minimize pixelwise cross-entropy on labeled source images with Adam.
pub fn train_source(cfg: &ExperimentConfig, arch: &Architecture, data: &LabeledImages) -> Result<SourceRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("source set is empty".into()));
    }
    let mut model = init_model(cfg, arch)?;
    let mut rng = Rng::with_stream(cfg.seed, streams::SOURCE_BATCH);
    let adam = cfg.source_adam();
    let mut state = AdamState::new(&model.params());
    let mut losses = Vec::with_capacity(cfg.source_steps);
    let b = cfg.batch_source.min(data.len());
    for step in 0..cfg.source_steps {
        let mut idx = rng.sample_without_replacement(data.len(), b);
        idx.sort_unstable();
        let batch = data.select(&idx);
        let mut tape = Tape::new();
        let z = model.embed_on_tape(&mut tape, model.features(&batch.images)?)?;
        let logits = model.classify_on_tape(&mut tape, z)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let value = tape.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = model.collect_grads(&tape.backward(loss, 1.0)?);
        adam_step(&mut model.params_mut(), &grads, &mut state, &adam, None)?;
        losses.push(value);
    }
    Ok(SourceRun { model, losses })
}
