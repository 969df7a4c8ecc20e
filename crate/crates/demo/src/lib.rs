//! Browser bindings for three small views of the method: sliced versus
//! exact transport cost, sampling from the prototype mixture, and a short
//! source-free adaptation run on two-dimensional blobs.
//!
//! The plain Rust API (`compare_distances`, [`Demo::build`] and friends)
//! carries the logic and is what the native tests exercise; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use proto_adapt::adaptation::{
    adapt_source_free, architecture, estimate_prototypes, evaluate_miou, infer, train_source,
    ExperimentConfig,
};
use proto_adapt::assignment::{exact_wasserstein_sq_small, EXACT_MAX_POINTS};
use proto_adapt::datasets::{generate, DomainSpec, LabeledImages, Variant};
use proto_adapt::gmm::{generate_pseudo_dataset, PrototypicalGmm};
use proto_adapt::nn::SegModel;
use proto_adapt::swd::{sliced_wasserstein_sq, SlicedConfig};
use proto_adapt::{Error, Result, Rng, Tensor};
use wasm_bindgen::prelude::*;

const CLASSES: usize = 3;
const CHANNELS: usize = 2;
const POINTS: usize = 600;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[exact, sliced]` squared distances between `points` standard normal
/// samples in `dim` dimensions and a copy shifted by `shift` along the
/// first axis. A single slice sees on average `1/dim` of the squared shift.
pub fn compare_distances(seed: u32, points: usize, dim: usize, shift: f64, projections: usize) -> Result<[f64; 2]> {
    if points == 0 || points > EXACT_MAX_POINTS || dim == 0 {
        return Err(Error::Usage(format!(
            "points must be in 1..={EXACT_MAX_POINTS} and dim positive"
        )));
    }
    let mut rng = Rng::new(u64::from(seed));
    let mut draw = |offset: f64| {
        let data = (0..points * dim)
            .map(|i| rng.normal() + if i % dim == 0 { offset } else { 0.0 })
            .collect();
        Tensor::new(vec![points, dim], data)
    };
    let x = draw(0.0)?;
    let y = draw(shift)?;
    let cfg = SlicedConfig {
        num_projections: projections,
        ..Default::default()
    };
    Ok([
        exact_wasserstein_sq_small(&x, &y)?,
        sliced_wasserstein_sq(&x, &y, &cfg, &mut rng)?,
    ])
}

#[wasm_bindgen(js_name = compareDistances)]
pub fn compare_distances_js(seed: u32, points: usize, dim: usize, shift: f64, projections: usize) -> std::result::Result<Vec<f64>, JsError> {
    compare_distances(seed, points, dim, shift, projections)
        .map(|r| r.to_vec())
        .map_err(js)
}

/// Flattened `(z0, z1, label)` triples, the first two embedding coordinates.
fn triples(z: &Tensor<f32>, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| [f64::from(z.row(i)[0]), f64::from(z.row(i)[1]), l as f64])
        .collect()
}

/// A trained blob classifier, its prototype mixture and a rotated target.
#[wasm_bindgen]
pub struct Demo {
    cfg: ExperimentConfig,
    model: SegModel<f32>,
    adapted: Option<SegModel<f32>>,
    gmm: PrototypicalGmm,
    source: LabeledImages,
    target: LabeledImages,
    kept: f64,
}

impl Demo {
    /// Train on source blobs and fit the mixture; the target domain is the
    /// same blobs rotated by `rotation_deg`.
    pub fn build(seed: u32, rotation_deg: f64) -> Result<Self> {
        let seed = u64::from(seed);
        let mut spec = DomainSpec::blobs(CLASSES, CHANNELS, POINTS, seed);
        spec.shift.rotation_deg = rotation_deg;
        let source = generate(&spec, Variant::Source, POINTS, seed)?;
        let target = generate(&spec, Variant::Target, POINTS, seed ^ 0xB10B)?;
        let cfg = ExperimentConfig {
            seed,
            source_steps: 600,
            batch_source: 64,
            batch_target: 64,
            pseudo_batch: 256,
            num_projections: 50,
            lr: 1e-3,
            tau_fit: 0.9,
            tau_filter: 0.9,
            neighborhood: false,
            ..Default::default()
        };
        let model = train_source(&cfg, &architecture(&cfg, CHANNELS, CLASSES), &source)?.model;
        let (gmm, _) = estimate_prototypes(&cfg, &model, &source)?;
        Ok(Self {
            cfg,
            model,
            adapted: None,
            gmm,
            source,
            target,
            kept: 1.0,
        })
    }

    /// Pseudo-samples kept at threshold `tau`, as `(z0, z1, label)` triples.
    pub fn pseudo(&mut self, tau: f64, n: usize) -> Result<Vec<f64>> {
        let mut rng = Rng::new(self.cfg.seed);
        let p = generate_pseudo_dataset(&self.gmm, &self.model, n, tau, &mut rng, self.cfg.max_draw_factor)?;
        self.kept = p.kept_fraction;
        Ok(triples(&p.z, &p.labels))
    }

    /// Run `steps` adaptation steps from the source model; returns the
    /// per-step sliced distance.
    pub fn run_adaptation(&mut self, steps: usize, lambda: f64, tau: f64) -> Result<Vec<f64>> {
        let cfg = ExperimentConfig {
            adapt_steps: steps,
            lambda,
            tau_filter: tau,
            ..self.cfg.clone()
        };
        let (m, report) = adapt_source_free(&self.model, &self.gmm, &self.target.images, &cfg)?;
        self.adapted = Some(m);
        Ok(report.records.iter().map(|r| r.swd).collect())
    }

    fn current(&self, adapted: bool) -> &SegModel<f32> {
        match (&self.adapted, adapted) {
            (Some(m), true) => m,
            _ => &self.model,
        }
    }

    /// Embeddings of target points with their true labels.
    pub fn target_embeddings(&self, adapted: bool) -> Result<Vec<f64>> {
        let inf = infer(self.current(adapted), &self.target.images, 1)?;
        Ok(triples(&inf.embeddings, &self.target.labels))
    }

    pub fn source_embeddings(&self) -> Result<Vec<f64>> {
        let inf = infer(&self.model, &self.source.images, 1)?;
        Ok(triples(&inf.embeddings, &self.source.labels))
    }

    pub fn target_accuracy(&self, adapted: bool) -> Result<f64> {
        Ok(evaluate_miou(self.current(adapted), &self.target, 1)?.pixel_accuracy)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, rotation_deg: f64) -> std::result::Result<Demo, JsError> {
        Self::build(seed, rotation_deg).map_err(js)
    }

    #[wasm_bindgen(js_name = pseudoSamples)]
    pub fn pseudo_samples(&mut self, tau: f64, n: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.pseudo(tau, n).map_err(js)
    }

    /// Accepted share of the draws behind the last `pseudoSamples` call.
    #[wasm_bindgen(js_name = keptFraction)]
    pub fn kept_fraction(&self) -> f64 {
        self.kept
    }

    pub fn adapt(&mut self, steps: usize, lambda: f64, tau: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.run_adaptation(steps, lambda, tau).map_err(js)
    }

    #[wasm_bindgen(js_name = targetPoints)]
    pub fn target_points(&self, adapted: bool) -> std::result::Result<Vec<f64>, JsError> {
        self.target_embeddings(adapted).map_err(js)
    }

    #[wasm_bindgen(js_name = sourcePoints)]
    pub fn source_points(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.source_embeddings().map_err(js)
    }

    #[wasm_bindgen(js_name = accuracy)]
    pub fn accuracy(&self, adapted: bool) -> std::result::Result<f64, JsError> {
        self.target_accuracy(adapted).map_err(js)
    }
}
