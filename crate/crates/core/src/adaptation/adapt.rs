use super::config::ExperimentConfig;
use super::streams;
use crate::adam::{adam_step, AdamState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gmm::{generate_pseudo_dataset, PrototypicalGmm};
use crate::nn::SegModel;
use crate::rng::Rng;
use crate::swd::SlicePlan;
use crate::tensor::Tensor;

/// Loss terms of one adaptation step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub swd: f64,
    pub total: f64,
}

/// Trace of an adaptation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationReport {
    pub records: Vec<StepRecord>,
    /// mean kept fraction of the per-step pseudo-batches
    pub kept_fraction: f64,
    pub wall_clock_secs: f64,
    pub lambda: f64,
    pub tau_filter: f64,
}

/// Seconds since the call; browsers have no monotonic clock in std, so
/// wasm builds report zero.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let t = std::time::Instant::now();
    move || t.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

/// Adapt `model` to unlabeled `target_images` `[N,H,W,C]` using only the
/// mixture as a stand-in for the source domain.
///
/// Each step draws a target batch and a fresh pseudo-batch, then minimizes
/// the pseudo-batch cross-entropy plus `lambda` times the sliced distance
/// between target pixel embeddings and the pseudo-samples. Pseudo-samples
/// are filtered by the classifier as it was before adaptation.
pub fn adapt_source_free(
    model: &SegModel<f32>,
    gmm: &PrototypicalGmm,
    target_images: &Tensor<f32>,
    cfg: &ExperimentConfig,
) -> Result<(SegModel<f32>, AdaptationReport)> {
    cfg.validate()?;
    if gmm.dim() != model.embed_dim() || gmm.num_classes() != model.num_classes() {
        return Err(Error::dim(
            "adapt_source_free",
            format!(
                "mixture {}x{} vs model {} classes, embed_dim {}",
                gmm.num_classes(),
                gmm.dim(),
                model.num_classes(),
                model.embed_dim()
            ),
        ));
    }
    let n_images = match target_images.shape() {
        [n, _, _, _] if *n > 0 => *n,
        s => return Err(Error::dim("adapt_source_free", format!("target images {s:?}"))),
    };
    let elapsed = stopwatch();
    let filter = model.clone();
    let mut model = model.clone();
    let mut batch_rng = Rng::with_stream(cfg.seed, streams::TARGET_BATCH);
    let mut pseudo_rng = Rng::with_stream(cfg.seed, streams::PSEUDO);
    let mut slice_rng = Rng::with_stream(cfg.seed, streams::SLICES);
    let adam = cfg.adapt_adam();
    let mut state = AdamState::new(&model.params());
    let cls_off = model.classifier_param_offset();
    let trainable: Vec<bool> = (0..model.num_params())
        .map(|i| !(cfg.freeze_classifier && i >= cls_off))
        .collect();
    let sliced = cfg.sliced();
    let b = cfg.batch_target.min(n_images);
    let mut records = Vec::with_capacity(cfg.adapt_steps);
    let mut kept_sum = 0.0;
    for step in 0..cfg.adapt_steps {
        let mut idx = batch_rng.sample_without_replacement(n_images, b);
        idx.sort_unstable();
        let batch = target_images.select_rows(&idx);
        let pseudo = generate_pseudo_dataset(
            gmm,
            &filter,
            cfg.pseudo_batch,
            cfg.tau_filter,
            &mut pseudo_rng,
            cfg.max_draw_factor,
        )?;
        kept_sum += pseudo.kept_fraction;

        let mut tape = Tape::new();
        let z_t = model.embed_on_tape(&mut tape, model.features(&batch)?)?;
        let z_p = tape.input(pseudo.z.clone());
        let logits = model.classify_on_tape(&mut tape, z_p)?;
        let ce = tape.softmax_cross_entropy(logits, &pseudo.labels)?;

        let emb = tape.value(z_t).clone();
        let plan = SlicePlan::draw(emb.cols(), emb.rows(), pseudo.len(), &sliced, &mut slice_rng)?;
        let eval = plan.evaluate(&emb, &pseudo.z, true)?;
        let swd = tape.external_loss(z_t, eval.value as f32, eval.grad.expect("requested"))?;
        let total = tape.weighted_sum(&[(ce, 1.0), (swd, cfg.lambda)]);

        let ce_v = tape.scalar(ce) as f64;
        let total_v = ce_v + cfg.lambda * eval.value;
        if !total_v.is_finite() {
            return Err(Error::Divergence { step });
        }
        let grads = model.collect_grads(&tape.backward(total, 1.0)?);
        adam_step(&mut model.params_mut(), &grads, &mut state, &adam, Some(&trainable))?;
        records.push(StepRecord {
            step,
            ce: ce_v,
            swd: eval.value,
            total: total_v,
        });
    }
    let kept_fraction = if records.is_empty() {
        0.0
    } else {
        kept_sum / records.len() as f64
    };
    Ok((
        model,
        AdaptationReport {
            records,
            kept_fraction,
            wall_clock_secs: elapsed(),
            lambda: cfg.lambda,
            tau_filter: cfg.tau_filter,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    /// A random model, random images, and a well-separated mixture in its
    /// embedding space.
    fn setup(seed: u64) -> (SegModel<f32>, PrototypicalGmm, Tensor<f32>) {
        let mut rng = Rng::new(seed);
        let model = SegModel::<f32>::init(&Architecture::desk_default(3, 3, false), &mut rng).unwrap();
        let data: Vec<f32> = (0..40 * 4 * 4 * 3).map(|_| rng.normal() as f32).collect();
        let imgs = Tensor::new(vec![40, 4, 4, 3], data).unwrap();
        let mu = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
        let mut sigma = vec![0.0; 27];
        for j in 0..3 {
            for a in 0..3 {
                sigma[j * 9 + a * 4] = 0.2;
            }
        }
        let sigma = Tensor::new(vec![3, 3, 3], sigma).unwrap();
        let gmm = PrototypicalGmm::from_parameters(vec![0.5, 0.3, 0.2], mu, sigma, 0.0).unwrap();
        (model, gmm, imgs)
    }

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            adapt_steps: 6,
            batch_target: 4,
            pseudo_batch: 48,
            num_projections: 20,
            tau_filter: 0.0,
            lr: 1e-3,
            neighborhood: false,
            ..Default::default()
        }
    }

    #[test]
    fn total_is_ce_plus_lambda_swd() {
        let (m, g, x) = setup(1);
        let (_, rep) = adapt_source_free(&m, &g, &x, &cfg()).unwrap();
        assert_eq!(rep.records.len(), 6);
        for r in &rep.records {
            assert!((r.total - (r.ce + 0.5 * r.swd)).abs() <= 1e-6);
            assert!(r.swd >= 0.0);
        }
    }

    #[test]
    fn zero_lambda_ignores_target_images() {
        let (m, g, x) = setup(2);
        let c = ExperimentConfig { lambda: 0.0, ..cfg() };
        let (a, ra) = adapt_source_free(&m, &g, &x, &c).unwrap();
        let other: Vec<f32> = x.data().iter().map(|v| v * 3.0 + 1.0).collect();
        let x2 = Tensor::new(x.shape().to_vec(), other).unwrap();
        let (b, rb) = adapt_source_free(&m, &g, &x2, &c).unwrap();
        assert_eq!(a, b);
        let ce = |r: &AdaptationReport| r.records.iter().map(|s| s.ce).collect::<Vec<_>>();
        assert_eq!(ce(&ra), ce(&rb));
        // encoder and decoder are untouched: only the classifier sees gradients
        let off = m.classifier_param_offset();
        assert_eq!(&a.params()[..off], &m.params()[..off]);
    }

    #[test]
    fn frozen_classifier_stays_fixed() {
        let (m, g, x) = setup(3);
        let c = ExperimentConfig { freeze_classifier: true, ..cfg() };
        let (a, _) = adapt_source_free(&m, &g, &x, &c).unwrap();
        let off = m.classifier_param_offset();
        assert_eq!(&a.params()[off..], &m.params()[off..]);
        assert_ne!(&a.params()[..off], &m.params()[..off]);
    }

    #[test]
    fn report_is_deterministic() {
        let (m, g, x) = setup(4);
        let (a, ra) = adapt_source_free(&m, &g, &x, &cfg()).unwrap();
        let (b, rb) = adapt_source_free(&m, &g, &x, &cfg()).unwrap();
        assert_eq!(a.to_mdl1_bytes(), b.to_mdl1_bytes());
        assert_eq!(ra.records, rb.records);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (m, g, x) = setup(5);
        let mut rng = Rng::new(0);
        let other = SegModel::<f32>::init(&Architecture::desk_default(3, 4, false), &mut rng).unwrap();
        assert!(adapt_source_free(&other, &g, &x, &cfg()).is_err());
        assert!(adapt_source_free(&m, &g, &x.clone().flatten_rows(), &cfg()).is_err());
    }
}
