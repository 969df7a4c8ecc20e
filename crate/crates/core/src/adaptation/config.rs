use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::swd::{Equalization, SlicedConfig};

/// Every knob of the train / estimate / adapt pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// support-set confidence threshold used when fitting the mixture
    pub tau_fit: f64,
    /// confidence threshold for keeping pseudo-samples
    pub tau_filter: f64,
    /// weight of the sliced Wasserstein term
    pub lambda: f64,
    pub num_projections: usize,
    pub source_steps: usize,
    pub adapt_steps: usize,
    /// images per source step
    pub batch_source: usize,
    /// images per adaptation step
    pub batch_target: usize,
    /// pseudo-samples per adaptation step
    pub pseudo_batch: usize,
    /// adaptation learning rate
    pub lr: f64,
    pub source_lr: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub max_draw_factor: usize,
    pub freeze_classifier: bool,
    pub unbiased_cov: bool,
    pub equalization: Equalization,
    /// 3x3 pixel neighborhoods as input features
    pub neighborhood: bool,
    pub threads: usize,
    /// free-form pointer to the data the run used; echoed, never interpreted
    pub dataset: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tau_fit: 0.97,
            tau_filter: 0.97,
            lambda: 0.5,
            num_projections: 100,
            source_steps: 1500,
            adapt_steps: 600,
            batch_source: 8,
            batch_target: 4,
            pseudo_batch: 1024,
            lr: 1e-4,
            source_lr: 1e-3,
            adam_eps: 1e-8,
            seed: 0,
            max_draw_factor: crate::gmm::DEFAULT_MAX_DRAW_FACTOR,
            freeze_classifier: false,
            unbiased_cov: false,
            equalization: Equalization::Subsample,
            neighborhood: true,
            threads: 1,
            dataset: String::new(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "tau_fit",
    "tau_filter",
    "lambda",
    "num_projections",
    "source_steps",
    "adapt_steps",
    "batch_source",
    "batch_target",
    "pseudo_batch",
    "lr",
    "source_lr",
    "adam_eps",
    "seed",
    "max_draw_factor",
    "freeze_classifier",
    "unbiased_cov",
    "equalization",
    "neighborhood",
    "threads",
    "dataset",
];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, tau) in [("tau_fit", self.tau_fit), ("tau_filter", self.tau_filter)] {
            if !(0.0..1.0).contains(&tau) {
                return Err(Error::config(key, format!("{tau} not in [0, 1)")));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        for (key, v) in [
            ("num_projections", self.num_projections),
            ("batch_source", self.batch_source),
            ("batch_target", self.batch_target),
            ("pseudo_batch", self.pseudo_batch),
            ("max_draw_factor", self.max_draw_factor),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        for (key, v) in [("lr", self.lr), ("source_lr", self.source_lr), ("adam_eps", self.adam_eps)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Defaults overridden by `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(CONFIG_KEYS)?;
        let mut c = Self::default();
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.parsed(stringify!($field))? { c.$field = v; })*
            };
        }
        take!(
            tau_fit, tau_filter, lambda, num_projections, source_steps, adapt_steps,
            batch_source, batch_target, pseudo_batch, lr, source_lr, adam_eps, seed,
            max_draw_factor, freeze_classifier, unbiased_cov, equalization, neighborhood,
            threads, dataset
        );
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("tau_fit", self.tau_fit);
        kv.set("tau_filter", self.tau_filter);
        kv.set("lambda", self.lambda);
        kv.set("num_projections", self.num_projections);
        kv.set("source_steps", self.source_steps);
        kv.set("adapt_steps", self.adapt_steps);
        kv.set("batch_source", self.batch_source);
        kv.set("batch_target", self.batch_target);
        kv.set("pseudo_batch", self.pseudo_batch);
        kv.set("lr", self.lr);
        kv.set("source_lr", self.source_lr);
        kv.set("adam_eps", self.adam_eps);
        kv.set("seed", self.seed);
        kv.set("max_draw_factor", self.max_draw_factor);
        kv.set("freeze_classifier", self.freeze_classifier);
        kv.set("unbiased_cov", self.unbiased_cov);
        kv.set("equalization", self.equalization);
        kv.set("neighborhood", self.neighborhood);
        kv.set("threads", self.threads);
        kv.set("dataset", &self.dataset);
        kv
    }

    pub fn sliced(&self) -> SlicedConfig {
        SlicedConfig {
            num_projections: self.num_projections,
            rng_seed: self.seed,
            equalization: self.equalization,
        }
    }

    pub fn source_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.source_lr,
            eps: self.adam_eps,
            ..AdamConfig::default()
        }
    }

    pub fn adapt_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            eps: self.adam_eps,
            ..AdamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let c = ExperimentConfig {
            lambda: 0.25,
            seed: 99,
            equalization: Equalization::QuantileInterp,
            dataset: "data/x".into(),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_itself() {
        let kv = KvMap::parse("lamda = 0.5\n").unwrap();
        let err = ExperimentConfig::from_kv(&kv).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in ["tau_fit = 1.0", "lambda = -1", "pseudo_batch = 0", "lr = nan"] {
            let kv = KvMap::parse(text).unwrap();
            assert!(ExperimentConfig::from_kv(&kv).is_err(), "{text}");
        }
    }
}
