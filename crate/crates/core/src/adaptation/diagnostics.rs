//! Observable terms of the target-error bound: distances between the
//! source, pseudo and target embedding distributions, the filter slack
//! `1 - tau`, and empirical errors where labels exist.
//!
//! Distances are squared 2-Wasserstein costs in the embedding space.

use crate::assignment::{exact_wasserstein_sq_small, EXACT_MAX_POINTS};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng::Rng;
use crate::swd::{sliced_wasserstein_sq, Equalization, SlicedConfig};
use crate::tensor::Tensor;

/// Subsamples averaged by the exact estimate.
pub const EXACT_RESAMPLES: usize = 10;
/// Points per side in each exact resample.
pub const EXACT_POINTS: usize = EXACT_MAX_POINTS;
/// Cap on points per side for the sliced estimate.
pub const SLICED_POINTS: usize = 4096;
/// Pseudo-samples drawn for diagnostics.
pub const DIAG_PSEUDO_POINTS: usize = 4096;

/// Two estimates of one distance. The exact value solves the matching
/// problem on small subsamples; the sliced value uses many more points but
/// is biased low.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceEstimate {
    pub exact: f64,
    pub exact_stderr: f64,
    pub sliced: f64,
}

fn subsample(x: &Tensor<f32>, m: usize, rng: &mut Rng) -> Tensor<f32> {
    if x.rows() <= m {
        return x.clone();
    }
    let mut idx = rng.sample_without_replacement(x.rows(), m);
    idx.sort_unstable();
    x.select_rows(&idx)
}

pub fn estimate_distance(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    num_projections: usize,
    rng: &mut Rng,
) -> Result<DistanceEstimate> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() || a.rows() == 0 || b.rows() == 0 {
        return Err(Error::dim(
            "estimate_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let m = EXACT_POINTS.min(a.rows()).min(b.rows());
    let draws: Vec<f64> = (0..EXACT_RESAMPLES)
        .map(|_| exact_wasserstein_sq_small(&subsample(a, m, rng), &subsample(b, m, rng)))
        .collect::<Result<_>>()?;
    let r = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / r;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let cfg = SlicedConfig {
        num_projections,
        rng_seed: 0,
        equalization: Equalization::Subsample,
    };
    let sliced = sliced_wasserstein_sq(
        &subsample(a, SLICED_POINTS, rng),
        &subsample(b, SLICED_POINTS, rng),
        &cfg,
        rng,
    )?;
    Ok(DistanceEstimate {
        exact: mean,
        exact_stderr: (var / r).sqrt(),
        sliced,
    })
}

/// What estimation time knows about the source domain. Persisted next to
/// the mixture so later diagnostics never need source data.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSummary {
    pub w_sp: DistanceEstimate,
    pub e_source: f64,
    pub n_source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundDiagnostics {
    pub w_sp: DistanceEstimate,
    pub w_tp_pre: DistanceEstimate,
    pub w_tp_post: Option<DistanceEstimate>,
    pub one_minus_tau: f64,
    pub e_source: Option<f64>,
    pub e_target_pre: Option<f64>,
    pub e_target_post: Option<f64>,
    /// source pixels, target pixels, pseudo-samples
    pub n: usize,
    pub m: usize,
    pub n_p: usize,
}

/// Distances from the target embeddings before (and optionally after)
/// adaptation to the pseudo-samples. Both use the same random subsamples
/// so their difference is not dominated by resampling noise.
pub fn compute_bound_diagnostics(
    source: &SourceSummary,
    pseudo: &Tensor<f32>,
    target_pre: &Tensor<f32>,
    target_post: Option<&Tensor<f32>>,
    tau_filter: f64,
    num_projections: usize,
    seed: u64,
) -> Result<BoundDiagnostics> {
    let w_tp_pre = estimate_distance(target_pre, pseudo, num_projections, &mut Rng::new(seed))?;
    let w_tp_post = target_post
        .map(|t| estimate_distance(t, pseudo, num_projections, &mut Rng::new(seed)))
        .transpose()?;
    Ok(BoundDiagnostics {
        w_sp: source.w_sp,
        w_tp_pre,
        w_tp_post,
        one_minus_tau: 1.0 - tau_filter,
        e_source: Some(source.e_source),
        e_target_pre: None,
        e_target_post: None,
        n: source.n_source,
        m: target_pre.rows(),
        n_p: pseudo.rows(),
    })
}

fn put_estimate(kv: &mut KvMap, name: &str, e: &DistanceEstimate) {
    kv.set(&format!("{name}_exact"), e.exact);
    kv.set(&format!("{name}_exact_stderr"), e.exact_stderr);
    kv.set(&format!("{name}_sliced"), e.sliced);
}

fn get_estimate(kv: &KvMap, name: &str) -> Result<Option<DistanceEstimate>> {
    let key = format!("{name}_exact");
    if !kv.contains(&key) {
        return Ok(None);
    }
    Ok(Some(DistanceEstimate {
        exact: kv.required(&key)?,
        exact_stderr: kv.required(&format!("{name}_exact_stderr"))?,
        sliced: kv.required(&format!("{name}_sliced"))?,
    }))
}

impl SourceSummary {
    pub fn write_kv(&self, kv: &mut KvMap) {
        put_estimate(kv, "w_sp", &self.w_sp);
        kv.set("e_source", self.e_source);
        kv.set("n_source", self.n_source);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        Ok(Self {
            w_sp: get_estimate(kv, "w_sp")?.ok_or_else(|| Error::config("w_sp_exact", "missing"))?,
            e_source: kv.required("e_source")?,
            n_source: kv.required("n_source")?,
        })
    }
}

impl BoundDiagnostics {
    /// Every distance is nonnegative and every error lies in `[0, 1]`.
    pub fn is_sane(&self) -> bool {
        let est = [Some(self.w_sp), Some(self.w_tp_pre), self.w_tp_post];
        let dist_ok = est
            .iter()
            .flatten()
            .all(|e| e.exact >= 0.0 && e.sliced >= 0.0 && e.exact_stderr >= 0.0);
        let errs = [self.e_source, self.e_target_pre, self.e_target_post];
        let err_ok = errs.iter().flatten().all(|e| (0.0..=1.0).contains(e));
        dist_ok && err_ok && (0.0..=1.0).contains(&self.one_minus_tau)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        put_estimate(&mut kv, "w_sp", &self.w_sp);
        put_estimate(&mut kv, "w_tp_pre", &self.w_tp_pre);
        if let Some(e) = &self.w_tp_post {
            put_estimate(&mut kv, "w_tp_post", e);
        }
        kv.set("one_minus_tau", self.one_minus_tau);
        for (k, v) in [
            ("e_source", self.e_source),
            ("e_target_pre", self.e_target_pre),
            ("e_target_post", self.e_target_post),
        ] {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
        kv.set("n_source", self.n);
        kv.set("m_target", self.m);
        kv.set("n_pseudo", self.n_p);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let need = |name: &str| {
            get_estimate(kv, name)?.ok_or_else(|| Error::config(format!("{name}_exact"), "missing"))
        };
        Ok(Self {
            w_sp: need("w_sp")?,
            w_tp_pre: need("w_tp_pre")?,
            w_tp_post: get_estimate(kv, "w_tp_post")?,
            one_minus_tau: kv.required("one_minus_tau")?,
            e_source: kv.parsed("e_source")?,
            e_target_pre: kv.parsed("e_target_pre")?,
            e_target_post: kv.parsed("e_target_post")?,
            n: kv.required("n_source")?,
            m: kv.required("m_target")?,
            n_p: kv.required("n_pseudo")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, shift: f64, rng: &mut Rng) -> Tensor<f32> {
        let v = (0..n * 3).map(|_| (rng.normal() + shift) as f32).collect();
        Tensor::new(vec![n, 3], v).unwrap()
    }

    #[test]
    fn same_distribution_agrees_within_two_standard_errors() {
        let mut rng = Rng::new(1);
        let source = cloud(3000, 0.0, &mut rng);
        let pseudo = cloud(3000, 0.5, &mut rng);
        let w_sp = estimate_distance(&source, &pseudo, 50, &mut Rng::new(10)).unwrap();
        let summary = SourceSummary { w_sp, e_source: 0.1, n_source: 3000 };
        let d = compute_bound_diagnostics(&summary, &pseudo, &source, None, 0.97, 50, 11).unwrap();
        let se = (w_sp.exact_stderr.powi(2) + d.w_tp_pre.exact_stderr.powi(2)).sqrt();
        assert!((d.w_tp_pre.exact - w_sp.exact).abs() <= 2.0 * se, "{d:?}");
        assert!((d.one_minus_tau - 0.03).abs() < 1e-12);
        assert!(d.is_sane());
    }

    #[test]
    fn closer_target_scores_lower() {
        let mut rng = Rng::new(2);
        let pseudo = cloud(2000, 0.0, &mut rng);
        let far = cloud(2000, 2.0, &mut rng);
        let near = cloud(2000, 0.2, &mut rng);
        let s = SourceSummary {
            w_sp: estimate_distance(&near, &pseudo, 30, &mut rng).unwrap(),
            e_source: 0.0,
            n_source: 2000,
        };
        let d = compute_bound_diagnostics(&s, &pseudo, &far, Some(&near), 0.5, 30, 3).unwrap();
        let post = d.w_tp_post.unwrap();
        assert!(post.exact < d.w_tp_pre.exact && post.sliced < d.w_tp_pre.sliced);
    }

    #[test]
    fn kv_round_trip() {
        let e = DistanceEstimate { exact: 1.5, exact_stderr: 0.25, sliced: 0.5 };
        let d = BoundDiagnostics {
            w_sp: e,
            w_tp_pre: e,
            w_tp_post: None,
            one_minus_tau: 0.2,
            e_source: Some(0.1),
            e_target_pre: None,
            e_target_post: Some(0.3),
            n: 10,
            m: 20,
            n_p: 30,
        };
        assert_eq!(BoundDiagnostics::from_kv(&d.to_kv()).unwrap(), d);
    }
}
