//! Prototypical class-conditional Gaussian mixture in the embedding space.
//!
//! Fit once on confident, correctly classified source pixels, then used as
//! the stand-in for the source distribution: samples drawn from it and
//! filtered by the classifier form the labeled pseudo-dataset.
//!
//! GMM1 layout, little-endian:
//!
//! ```text
//! b"GMM1" | u32 K | u32 d | f32 tau_fit | TNS1 alpha[K] | TNS1 mu[K,d] | TNS1 sigma[K,d,d]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::nn::{argmax_rows, SegModel};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{read_exact, read_f32, read_u32, Tensor};

pub const GMM1_MAGIC: &[u8; 4] = b"GMM1";
/// Lower bound on the covariance jitter so degenerate classes stay factorizable.
pub const JITTER_FLOOR: f64 = 1e-9;
/// Default rejection-sampling budget, as a multiple of the requested count.
pub const DEFAULT_MAX_DRAW_FACTOR: usize = 20;

/// Per-class index lists of confident, correctly predicted pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSets {
    pub members: Vec<Vec<usize>>,
    pub tau: f64,
}

impl SupportSets {
    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// Pixel `i` joins class `j` when its label is `j`, the classifier's argmax
/// is `j`, and the probability of `j` exceeds `tau`.
pub fn build_support_sets<T: Real>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    probs: &Tensor<T>,
    tau: f64,
) -> Result<SupportSets> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config("tau_fit", format!("{tau} not in [0, 1)")));
    }
    let n = embeddings.rows();
    if labels.len() != n || probs.rows() != n {
        return Err(Error::dim(
            "build_support_sets",
            format!("{n} embeddings, {} labels, {} prob rows", labels.len(), probs.rows()),
        ));
    }
    let k = probs.cols();
    let mut members = vec![Vec::new(); k];
    for (i, (&label, (pred, conf))) in labels.iter().zip(argmax_rows(probs)).enumerate() {
        if label >= k {
            return Err(Error::dim("build_support_sets", format!("label {label} >= {k}")));
        }
        if label == pred && conf.as_f64() > tau {
            members[label].push(i);
        }
    }
    Ok(SupportSets { members, tau })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypicalGmm {
    pub alpha: Vec<f64>,
    /// `[K x d]`
    pub mu: Tensor<f64>,
    /// `[K x d x d]`, jitter included
    pub sigma: Tensor<f64>,
    /// `[K x d x d]` lower Cholesky factors of `sigma`
    pub chol: Tensor<f64>,
    pub jitter: Vec<f64>,
    pub tau_fit: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EstimateOptions {
    /// `1/(n-1)` instead of the default `1/n` normalization
    pub unbiased: bool,
}

/// Closed-form per-class estimates: weights from support counts, sample
/// means, and sample covariances with a small diagonal jitter.
pub fn estimate_gmm<T: Real>(
    embeddings: &Tensor<T>,
    support: &SupportSets,
    opts: EstimateOptions,
) -> Result<PrototypicalGmm> {
    let d = embeddings.cols();
    let k = support.members.len();
    for (j, m) in support.members.iter().enumerate() {
        if m.len() < d + 1 {
            return Err(Error::Estimation {
                class: j,
                count: m.len(),
                needed: d + 1,
            });
        }
    }
    let total: usize = support.members.iter().map(Vec::len).sum();
    let alpha: Vec<f64> = support
        .members
        .iter()
        .map(|m| m.len() as f64 / total as f64)
        .collect();
    let mut mu = Vec::with_capacity(k * d);
    let mut sigma = Vec::with_capacity(k * d * d);
    let mut chol = Vec::with_capacity(k * d * d);
    let mut jitters = Vec::with_capacity(k);
    for (j, m) in support.members.iter().enumerate() {
        let n = m.len() as f64;
        let mut mean = vec![0f64; d];
        for &i in m {
            for (a, v) in mean.iter_mut().zip(embeddings.row(i)) {
                *a += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut cov = vec![0f64; d * d];
        let mut dev = vec![0f64; d];
        for &i in m {
            for ((o, v), c) in dev.iter_mut().zip(embeddings.row(i)).zip(&mean) {
                *o = v.as_f64() - c;
            }
            for a in 0..d {
                for b in 0..=a {
                    cov[a * d + b] += dev[a] * dev[b];
                }
            }
        }
        let denom = if opts.unbiased { n - 1.0 } else { n };
        for a in 0..d {
            for b in 0..=a {
                let v = cov[a * d + b] / denom;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
        let base = (1e-6 * trace / d as f64).max(JITTER_FLOOR);
        let cov_t = Tensor::from_parts(vec![d, d], cov)?;
        let (l, used) = cholesky_with_jitter(&cov_t, base)
            .map_err(|_| Error::Factorization { class: Some(j) })?;
        let mut cov = cov_t.into_data();
        for a in 0..d {
            cov[a * d + a] += used;
        }
        mu.extend(mean);
        sigma.extend(cov);
        chol.extend(l.into_data());
        jitters.push(used);
    }
    Ok(PrototypicalGmm {
        alpha,
        mu: Tensor::from_parts(vec![k, d], mu)?,
        sigma: Tensor::from_parts(vec![k, d, d], sigma)?,
        chol: Tensor::from_parts(vec![k, d, d], chol)?,
        jitter: jitters,
        tau_fit: support.tau,
    })
}

impl PrototypicalGmm {
    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        self.mu.row(j)
    }

    pub fn covariance(&self, j: usize) -> Tensor<f64> {
        let d = self.dim();
        Tensor::from_parts(vec![d, d], self.sigma.row(j).to_vec()).expect("d x d")
    }

    fn chol_row(&self, j: usize) -> &[f64] {
        self.chol.row(j)
    }

    /// Per-component `log N(z | mu_j, sigma_j)`.
    pub fn component_log_density(&self, j: usize, z: &[f64]) -> f64 {
        let d = self.dim();
        let l = self.chol_row(j);
        let mu = self.mean(j);
        // forward substitution: L y = z - mu
        let mut y = vec![0f64; d];
        let mut log_det = 0f64;
        for a in 0..d {
            let mut s = z[a] - mu[a];
            for b in 0..a {
                s -= l[a * d + b] * y[b];
            }
            y[a] = s / l[a * d + a];
            log_det += l[a * d + a].ln();
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * maha
    }

    /// Draw one point from component `j`.
    pub fn sample_component(&self, j: usize, rng: &mut Rng, out: &mut [f64]) {
        let d = self.dim();
        let l = self.chol_row(j);
        let mu = self.mean(j);
        let eps: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for a in 0..d {
            let s: f64 = (0..=a).map(|b| l[a * d + b] * eps[b]).sum();
            out[a] = mu[a] + s;
        }
    }

    /// Draw `n` points; returns `(points [n x d], component index per point)`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Tensor<f64>, Vec<usize>) {
        let d = self.dim();
        let mut data = vec![0f64; n * d];
        let mut comps = Vec::with_capacity(n);
        for row in data.chunks_exact_mut(d) {
            let j = rng.categorical(&self.alpha);
            self.sample_component(j, rng, row);
            comps.push(j);
        }
        (Tensor::from_parts(vec![n, d], data).expect("shape"), comps)
    }

    pub fn write_gmm1<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let (k, d) = (self.num_classes(), self.dim());
        w.write_all(GMM1_MAGIC)?;
        w.write_all(&(k as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&(self.tau_fit as f32).to_le_bytes())?;
        Tensor::from_parts(vec![k], self.alpha.clone())
            .expect("alpha")
            .write_tns1(w)?;
        self.mu.write_tns1(w)?;
        self.sigma.write_tns1(w)
    }

    pub fn to_gmm1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_gmm1(&mut out).expect("vec write");
        out
    }

    pub fn read_gmm1<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != GMM1_MAGIC {
            return Err(Error::format("GMM1", format!("bad magic {magic:02x?}")));
        }
        let k = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let tau_fit = read_f32(r)? as f64;
        let alpha = Tensor::<f64>::read_tns1(r)?;
        let mu = Tensor::<f64>::read_tns1(r)?;
        let sigma = Tensor::<f64>::read_tns1(r)?;
        if alpha.shape() != [k] || mu.shape() != [k, d] || sigma.shape() != [k, d, d] {
            return Err(Error::format(
                "GMM1",
                format!(
                    "header K={k} d={d} but tensors {:?} {:?} {:?}",
                    alpha.shape(),
                    mu.shape(),
                    sigma.shape()
                ),
            ));
        }
        Self::from_parameters(alpha.into_data(), mu, sigma, tau_fit)
    }

    /// Rebuild from stored parameters, refactorizing the covariances.
    pub fn from_parameters(
        alpha: Vec<f64>,
        mu: Tensor<f64>,
        sigma: Tensor<f64>,
        tau_fit: f64,
    ) -> Result<Self> {
        let (k, d) = (mu.rows(), mu.cols());
        if alpha.iter().any(|&a| !(a >= 0.0)) || (alpha.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
            return Err(Error::format("GMM1", "mixture weights are not a distribution"));
        }
        let mut chol = Vec::with_capacity(k * d * d);
        let mut jitter = Vec::with_capacity(k);
        for j in 0..k {
            let s = Tensor::from_parts(vec![d, d], sigma.row(j).to_vec())?;
            let (l, used) =
                cholesky_with_jitter(&s, 0.0).map_err(|_| Error::Factorization { class: Some(j) })?;
            chol.extend(l.into_data());
            jitter.push(used);
        }
        Ok(Self {
            alpha,
            mu,
            sigma,
            chol: Tensor::from_parts(vec![k, d, d], chol)?,
            jitter,
            tau_fit,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_gmm1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_gmm1(&mut bytes.as_slice())
    }
}

/// `log sum_j alpha_j N(z | mu_j, sigma_j)`, combined with log-sum-exp.
pub fn gmm_log_density(gmm: &PrototypicalGmm, z: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..gmm.num_classes())
        .filter(|&j| gmm.alpha[j] > 0.0)
        .map(|j| gmm.alpha[j].ln() + gmm.component_log_density(j, z))
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Classifier-filtered samples from the mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataset {
    /// `[N_p x d]`
    pub z: Tensor<f32>,
    pub labels: Vec<usize>,
    pub drawn: usize,
    pub kept_fraction: f64,
    pub class_counts: Vec<usize>,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rejection-sample labeled points: draw a component by weight, draw a
/// point from it, label the point with the classifier's argmax and keep it
/// when the classifier's top probability exceeds `tau`. Stops at `n_target`
/// kept points or `max_draw_factor * n_target` draws.
pub fn generate_pseudo_dataset(
    gmm: &PrototypicalGmm,
    model: &SegModel<f32>,
    n_target: usize,
    tau: f64,
    rng: &mut Rng,
    max_draw_factor: usize,
) -> Result<PseudoDataset> {
    if n_target == 0 {
        return Err(Error::Usage("pseudo-dataset size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config("tau_filter", format!("{tau} not in [0, 1)")));
    }
    if gmm.dim() != model.embed_dim() {
        return Err(Error::dim(
            "generate_pseudo_dataset",
            format!("mixture dim {} vs embed_dim {}", gmm.dim(), model.embed_dim()),
        ));
    }
    let d = gmm.dim();
    let budget = max_draw_factor.max(1) * n_target;
    let mut kept_z: Vec<f32> = Vec::with_capacity(n_target * d);
    let mut labels = Vec::with_capacity(n_target);
    let mut drawn = 0usize;
    let mut point = vec![0f64; d];
    while labels.len() < n_target && drawn < budget {
        let chunk = (n_target - labels.len()).max(64).min(budget - drawn);
        let mut buf = Vec::with_capacity(chunk * d);
        for _ in 0..chunk {
            let j = rng.categorical(&gmm.alpha);
            gmm.sample_component(j, rng, &mut point);
            buf.extend(point.iter().map(|&v| v as f32));
        }
        let zs = Tensor::from_parts(vec![chunk, d], buf)?;
        let probs = softmax_rows(&model.logits(&zs)?);
        for (i, (pred, conf)) in argmax_rows(&probs).into_iter().enumerate() {
            drawn += 1;
            if conf as f64 > tau {
                kept_z.extend_from_slice(zs.row(i));
                labels.push(pred);
                if labels.len() == n_target {
                    break;
                }
            }
        }
    }
    let kept = labels.len();
    let kept_fraction = kept as f64 / drawn as f64;
    if kept == 0 || 2 * kept < n_target {
        return Err(Error::Generation {
            kept,
            drawn,
            target: n_target,
            kept_fraction,
        });
    }
    let mut class_counts = vec![0usize; model.num_classes()];
    for &l in &labels {
        class_counts[l] += 1;
    }
    Ok(PseudoDataset {
        z: Tensor::from_parts(vec![kept, d], kept_z)?,
        labels,
        drawn,
        kept_fraction,
        class_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Dense};

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn support_sets_partition_when_everything_is_right() {
        let z = t(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let p = t(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]]);
        let s = build_support_sets(&z, &[0, 1, 0, 1], &p, 0.0).unwrap();
        assert_eq!(s.members, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn uniform_classifier_gives_empty_sets_at_high_tau() {
        let z = t(&vec![vec![0.0]; 6]);
        let p = Tensor::filled(&[6, 3], 1.0 / 3.0);
        let s = build_support_sets(&z, &[0, 1, 2, 0, 1, 2], &p, 0.99).unwrap();
        assert!(s.members.iter().all(Vec::is_empty));
    }

    #[test]
    fn support_sets_match_filter_oracle_and_shrink_with_tau() {
        let mut rng = Rng::new(8);
        let n = 20;
        let z = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let logits = Tensor::new(vec![n, 3], (0..3 * n).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let p = softmax_rows(&logits);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let mut prev: Option<Vec<usize>> = None;
        for tau in [0.0, 0.3, 0.5, 0.7, 0.9] {
            let s = build_support_sets(&z, &labels, &p, tau).unwrap();
            for j in 0..3 {
                let oracle: Vec<usize> = (0..n)
                    .filter(|&i| {
                        let row = p.row(i);
                        let best = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                        labels[i] == j && best == j && row[j] > tau
                    })
                    .collect();
                assert_eq!(s.members[j], oracle);
            }
            let counts = s.counts();
            if let Some(pc) = prev {
                assert!(counts.iter().zip(&pc).all(|(a, b)| a <= b));
            }
            prev = Some(counts);
        }
    }

    #[test]
    fn degenerate_class_gets_jitter_covariance() {
        let z = t(&vec![vec![1.0, 2.0]; 5]);
        let s = SupportSets {
            members: vec![(0..5).collect()],
            tau: 0.5,
        };
        let g = estimate_gmm(&z, &s, EstimateOptions::default()).unwrap();
        assert_eq!(g.mean(0), &[1.0, 2.0]);
        let j = g.jitter[0];
        assert!(j > 0.0);
        assert_eq!(g.covariance(0).data(), &[j, 0.0, 0.0, j]);
        assert_eq!(g.alpha, vec![1.0]);
    }

    #[test]
    fn hand_computed_two_class_estimate() {
        let z = t(&[
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![1.0, 3.0],
            vec![5.0, 5.0],
            vec![6.0, 5.0],
            vec![5.0, 7.0],
        ]);
        let s = SupportSets {
            members: vec![vec![0, 1, 2], vec![3, 4, 5]],
            tau: 0.0,
        };
        let g = estimate_gmm(&z, &s, EstimateOptions::default()).unwrap();
        assert_eq!(g.mean(0), &[1.0, 1.0]);
        // deviations (-1,-1), (1,-1), (0,2): sums xx=2, xy=0, yy=6, over 3
        let c0 = g.covariance(0);
        let j0 = g.jitter[0];
        let expect = [2.0 / 3.0 + j0, 0.0, 0.0, 2.0 + j0];
        for (a, b) in c0.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(g.alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn alpha_is_the_count_ratio() {
        let mut rng = Rng::new(9);
        let z = Tensor::new(vec![40, 1], (0..40).map(|_| rng.normal()).collect()).unwrap();
        let s = SupportSets {
            members: vec![(0..30).collect(), (30..40).collect()],
            tau: 0.0,
        };
        let g = estimate_gmm(&z, &s, EstimateOptions::default()).unwrap();
        assert_eq!(g.alpha, vec![0.75, 0.25]);
    }

    #[test]
    fn starved_class_is_named() {
        let z = t(&vec![vec![0.0, 0.0]; 4]);
        let s = SupportSets {
            members: vec![vec![0, 1, 2], vec![3]],
            tau: 0.9,
        };
        match estimate_gmm(&z, &s, EstimateOptions::default()) {
            Err(Error::Estimation { class, count, needed }) => {
                assert_eq!((class, count, needed), (1, 1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn standard_normal_gmm(d: usize) -> PrototypicalGmm {
        PrototypicalGmm::from_parameters(
            vec![1.0],
            Tensor::zeros(&[1, d]),
            Tensor::identity(d).reshape(&[1, d, d]).unwrap(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let g = standard_normal_gmm(2);
        let v = gmm_log_density(&g, &[0.0, 0.0]);
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_density_matches_direct_sum() {
        let mu = t(&[vec![0.0, 1.0], vec![2.0, -1.0]]);
        let sigma = Tensor::new(
            vec![2, 2, 2],
            vec![1.0, 0.3, 0.3, 0.5, 2.0, -0.4, -0.4, 1.0],
        )
        .unwrap();
        let g = PrototypicalGmm::from_parameters(vec![0.3, 0.7], mu, sigma.clone(), 0.0).unwrap();
        let mut rng = Rng::new(10);
        for _ in 0..20 {
            let z = [rng.normal() * 2.0, rng.normal() * 2.0];
            let mut direct = 0.0;
            for j in 0..2 {
                let s = sigma.row(j);
                let det = s[0] * s[3] - s[1] * s[2];
                let inv = [s[3] / det, -s[1] / det, -s[2] / det, s[0] / det];
                let m = g.mean(j);
                let (dx, dy) = (z[0] - m[0], z[1] - m[1]);
                let q = dx * (inv[0] * dx + inv[1] * dy) + dy * (inv[2] * dx + inv[3] * dy);
                direct += g.alpha[j] * (-0.5 * q).exp()
                    / (2.0 * std::f64::consts::PI * det.sqrt());
            }
            let v = gmm_log_density(&g, &z);
            assert!((v - direct.ln()).abs() < 1e-9);
            assert!(v.exp() > 0.0 && v.is_finite());
        }
    }

    #[test]
    fn gmm1_layout_and_round_trip() {
        let g = standard_normal_gmm(3);
        let bytes = g.to_gmm1_bytes();
        assert_eq!(&bytes[..4], b"GMM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..20], b"TNS1");
        let back = PrototypicalGmm::read_gmm1(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, g);
        assert!(PrototypicalGmm::read_gmm1(&mut &bytes[..bytes.len() - 4]).is_err());
    }

    /// Two-class head that scores `w * z[0]` vs `-w * z[0]`.
    fn sign_classifier(d: usize, w: f32) -> SegModel<f32> {
        let mut arch = Architecture::desk_default(1, 2, false);
        arch.embed_dim = d;
        arch.encoder_widths = vec![];
        arch.classifier_hidden = vec![];
        let mut m = SegModel::init(&arch, &mut Rng::new(0)).unwrap();
        let mut cw = vec![0f32; d * 2];
        cw[0] = w;
        cw[1] = -w;
        let layers: Vec<Dense<f32>> = vec![
            m.layers()[0].clone(),
            Dense {
                weight: Tensor::new(vec![d, 2], cw).unwrap(),
                bias: Tensor::zeros(&[2]),
            },
        ];
        m = SegModel::from_layers(layers, 0, 1, 1, false, 2, d).unwrap();
        m
    }

    fn two_blob_gmm(alpha0: f64) -> PrototypicalGmm {
        PrototypicalGmm::from_parameters(
            vec![alpha0, 1.0 - alpha0],
            t(&[vec![4.0, 0.0], vec![-4.0, 0.0]]),
            Tensor::new(vec![2, 2, 2], vec![0.25, 0.0, 0.0, 0.25, 0.25, 0.0, 0.0, 0.25]).unwrap(),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn tau_zero_keeps_everything_with_argmax_labels() {
        let g = two_blob_gmm(0.5);
        let m = sign_classifier(2, 1.0);
        let p = generate_pseudo_dataset(&g, &m, 300, 0.0, &mut Rng::new(1), 20).unwrap();
        assert_eq!(p.kept_fraction, 1.0);
        assert_eq!(p.len(), 300);
        let probs = softmax_rows(&m.logits(&p.z).unwrap());
        for ((pred, _), &l) in argmax_rows(&probs).into_iter().zip(&p.labels) {
            assert_eq!(pred, l);
        }
    }

    #[test]
    fn near_uniform_classifier_fails_generation() {
        let g = two_blob_gmm(0.5);
        let m = sign_classifier(2, 1e-4);
        match generate_pseudo_dataset(&g, &m, 100, 0.999, &mut Rng::new(2), 20) {
            Err(Error::Generation { kept, .. }) => assert_eq!(kept, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retained_proportions_follow_weights() {
        let g = two_blob_gmm(0.7);
        let m = sign_classifier(2, 3.0);
        let tau = 0.97;
        let p = generate_pseudo_dataset(&g, &m, 5000, tau, &mut Rng::new(3), 20).unwrap();
        let frac0 = p.class_counts[0] as f64 / p.len() as f64;
        assert!((frac0 - 0.7).abs() < 0.05, "{frac0}");
        // every kept row re-checks above tau
        let probs = softmax_rows(&m.logits(&p.z).unwrap());
        for (_, conf) in argmax_rows(&probs) {
            assert!(conf as f64 > tau);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = two_blob_gmm(0.4);
        let m = sign_classifier(2, 2.0);
        let a = generate_pseudo_dataset(&g, &m, 200, 0.9, &mut Rng::new(4), 20).unwrap();
        let b = generate_pseudo_dataset(&g, &m, 200, 0.9, &mut Rng::new(4), 20).unwrap();
        assert_eq!(a, b);
    }
}
