//! Sliced Wasserstein distance.
//!
//! Both point sets are projected on random unit directions; in one
//! dimension optimal transport pairs sorted values, so each slice costs a
//! sort. The reported quantity is the mean over slices of the mean squared
//! gap between matched projections, i.e. a squared distance normalized by
//! both the slice count and the sample count.
//!
//! A [`SlicePlan`] freezes the random parts (directions and any subsample)
//! so the same objective can be evaluated repeatedly, which finite
//! differences need. Fresh plans are drawn for every optimization step.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linalg::sample_unit_sphere;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How two sets of different size are brought to a common count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Equalization {
    /// Uniformly subsample the larger set, without replacement, once per plan.
    #[default]
    Subsample,
    /// Evaluate the larger set's empirical quantile function, linearly
    /// interpolated, at the smaller set's mid-rank levels.
    QuantileInterp,
}

impl std::str::FromStr for Equalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subsample" => Ok(Self::Subsample),
            "quantile-interp" => Ok(Self::QuantileInterp),
            other => Err(Error::config(
                "equalization",
                format!("`{other}` is not one of subsample | quantile-interp"),
            )),
        }
    }
}

impl std::fmt::Display for Equalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Subsample => "subsample",
            Self::QuantileInterp => "quantile-interp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicedConfig {
    pub num_projections: usize,
    pub rng_seed: u64,
    pub equalization: Equalization,
}

impl Default for SlicedConfig {
    fn default() -> Self {
        Self {
            num_projections: 100,
            rng_seed: 0,
            equalization: Equalization::Subsample,
        }
    }
}

/// `(1/m) * sum_i (a_sorted[i] - b_sorted[i])^2`. Inputs are not modified.
pub fn wasserstein1d_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(
            "wasserstein1d_sq",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Indices sorting `vals` ascending; ties keep index order.
fn argsort(vals: &[f64]) -> Vec<usize> {
    // keys are unique once the index breaks ties, so an unstable sort is exact
    let mut keyed: Vec<(f64, usize)> = vals.iter().copied().zip(0..).collect();
    keyed.sort_unstable_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Frozen random choices for one sliced evaluation.
#[derive(Clone, Debug)]
pub struct SlicePlan {
    /// `[L x d]` unit directions
    pub directions: Tensor<f64>,
    pub equalization: Equalization,
    /// rows of x (resp. y) kept by subsampling; `None` keeps all rows
    pub x_rows: Option<Vec<usize>>,
    pub y_rows: Option<Vec<usize>>,
}

/// Result of evaluating a plan.
#[derive(Clone, Debug)]
pub struct SlicedEval<T> {
    pub value: f64,
    /// mean squared 1-D transport cost of each slice
    pub per_projection: Vec<f64>,
    /// gradient with respect to `x`, when requested
    pub grad: Option<Tensor<T>>,
}

impl SlicePlan {
    pub fn draw(dim: usize, m: usize, n: usize, cfg: &SlicedConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.num_projections == 0 {
            return Err(Error::config("num_projections", "must be >= 1"));
        }
        if m == 0 || n == 0 {
            return Err(Error::dim("sliced_wasserstein", "empty point set"));
        }
        let directions = sample_unit_sphere::<f64>(dim, cfg.num_projections, rng)?;
        let (mut x_rows, mut y_rows) = (None, None);
        if cfg.equalization == Equalization::Subsample && m != n {
            let mut pick = if m > n {
                rng.sample_without_replacement(m, n)
            } else {
                rng.sample_without_replacement(n, m)
            };
            pick.sort_unstable();
            if m > n {
                x_rows = Some(pick);
            } else {
                y_rows = Some(pick);
            }
        }
        Ok(Self {
            directions,
            equalization: cfg.equalization,
            x_rows,
            y_rows,
        })
    }

    /// Plan with explicit directions and no subsampling.
    pub fn with_directions(directions: Tensor<f64>) -> Self {
        Self {
            directions,
            equalization: Equalization::Subsample,
            x_rows: None,
            y_rows: None,
        }
    }

    pub fn num_projections(&self) -> usize {
        self.directions.rows()
    }

    pub fn evaluate<T: Real>(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        want_grad: bool,
    ) -> Result<SlicedEval<T>> {
        let d = self.directions.cols();
        if x.rank() != 2 || y.rank() != 2 || x.cols() != d || y.cols() != d {
            return Err(Error::dim(
                "sliced_wasserstein",
                format!(
                    "x {:?}, y {:?}, directions in {d} dims",
                    x.shape(),
                    y.shape()
                ),
            ));
        }
        let xr: Vec<usize> = self.x_rows.clone().unwrap_or_else(|| (0..x.rows()).collect());
        let yr: Vec<usize> = self.y_rows.clone().unwrap_or_else(|| (0..y.rows()).collect());
        if self.equalization == Equalization::Subsample && xr.len() != yr.len() {
            return Err(Error::dim(
                "sliced_wasserstein",
                format!("plan drawn for other sizes ({} vs {})", xr.len(), yr.len()),
            ));
        }
        let l = self.num_projections();
        let mut grad = want_grad.then(|| vec![0f64; x.len()]);
        let mut per_projection = Vec::with_capacity(l);
        let mut px = vec![0f64; xr.len()];
        let mut py = vec![0f64; yr.len()];
        for k in 0..l {
            let dir = self.directions.row(k);
            project(x, &xr, dir, &mut px);
            project(y, &yr, dir, &mut py);
            let ox = argsort(&px);
            let oy = argsort(&py);
            // (x position in xr, weight, target value) contributions
            let mut cost = 0f64;
            let mut pair = |xi: usize, w: f64, diff: f64, cost: &mut f64| {
                *cost += diff * diff;
                if let Some(g) = grad.as_mut() {
                    let row = xr[xi];
                    let s = 2.0 * diff * w / l as f64;
                    for (c, &dv) in dir.iter().enumerate() {
                        g[row * d + c] += s * dv;
                    }
                }
            };
            let count;
            if ox.len() == oy.len() {
                count = ox.len();
                for (&i, &j) in ox.iter().zip(&oy) {
                    let diff = px[i] - py[j];
                    pair(i, 1.0 / count as f64, diff, &mut cost);
                }
            } else if ox.len() < oy.len() {
                count = ox.len();
                let sy: Vec<f64> = oy.iter().map(|&j| py[j]).collect();
                for (r, &i) in ox.iter().enumerate() {
                    let (lo, hi, frac) = quantile_pos(r, count, sy.len());
                    let q = sy[lo] * (1.0 - frac) + sy[hi] * frac;
                    pair(i, 1.0 / count as f64, px[i] - q, &mut cost);
                }
            } else {
                // x is the larger set: its quantiles move with x
                count = oy.len();
                for (r, &j) in oy.iter().enumerate() {
                    let (lo, hi, frac) = quantile_pos(r, count, ox.len());
                    let (i_lo, i_hi) = (ox[lo], ox[hi]);
                    let q = px[i_lo] * (1.0 - frac) + px[i_hi] * frac;
                    let diff = q - py[j];
                    cost += diff * diff;
                    if let Some(g) = grad.as_mut() {
                        let s = 2.0 * diff / (count as f64 * l as f64);
                        for (xi, w) in [(i_lo, 1.0 - frac), (i_hi, frac)] {
                            let row = xr[xi];
                            for (c, &dv) in dir.iter().enumerate() {
                                g[row * d + c] += s * w * dv;
                            }
                        }
                    }
                }
            }
            per_projection.push(cost / count as f64);
        }
        let value = per_projection.iter().sum::<f64>() / l as f64;
        let grad = match grad {
            Some(g) => Some(Tensor::from_parts(
                x.shape().to_vec(),
                g.into_iter().map(T::from_f64).collect(),
            )?),
            None => None,
        };
        Ok(SlicedEval {
            value,
            per_projection,
            grad,
        })
    }

    /// Smallest gap between consecutive sorted projected values of `x`
    /// over all slices; finite differences are only meaningful when this
    /// is clear of the step size.
    pub fn min_projected_gap<T: Real>(&self, x: &Tensor<T>, y: &Tensor<T>) -> f64 {
        let xr: Vec<usize> = self.x_rows.clone().unwrap_or_else(|| (0..x.rows()).collect());
        let yr: Vec<usize> = self.y_rows.clone().unwrap_or_else(|| (0..y.rows()).collect());
        let mut best = f64::INFINITY;
        let mut px = vec![0f64; xr.len()];
        let mut py = vec![0f64; yr.len()];
        for k in 0..self.num_projections() {
            let dir = self.directions.row(k);
            project(x, &xr, dir, &mut px);
            project(y, &yr, dir, &mut py);
            for v in [&mut px, &mut py] {
                v.sort_by(f64::total_cmp);
                for w in v.windows(2) {
                    best = best.min(w[1] - w[0]);
                }
            }
        }
        best
    }
}

/// Position of mid-rank level `(r + 0.5) / count` in a sorted array of `len`.
fn quantile_pos(r: usize, count: usize, len: usize) -> (usize, usize, f64) {
    let u = (r as f64 + 0.5) / count as f64;
    let pos = (u * len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, pos - lo as f64)
}

fn project<T: Real>(pts: &Tensor<T>, rows: &[usize], dir: &[f64], out: &mut [f64]) {
    for (o, &r) in out.iter_mut().zip(rows) {
        *o = pts
            .row(r)
            .iter()
            .zip(dir)
            .map(|(a, b)| a.as_f64() * b)
            .sum();
    }
}

/// Squared sliced Wasserstein distance with fresh random slices.
pub fn sliced_wasserstein_sq<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SlicedConfig,
    rng: &mut Rng,
) -> Result<f64> {
    check_dims(x, y)?;
    let plan = SlicePlan::draw(x.cols(), x.rows(), y.rows(), cfg, rng)?;
    Ok(plan.evaluate(x, y, false)?.value)
}

/// Value and gradient with respect to `x`; `y` is held fixed. Sort orders
/// are treated as locally constant.
pub fn sliced_wasserstein_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SlicedConfig,
    rng: &mut Rng,
) -> Result<(f64, Tensor<T>)> {
    check_dims(x, y)?;
    let plan = SlicePlan::draw(x.cols(), x.rows(), y.rows(), cfg, rng)?;
    let e = plan.evaluate(x, y, true)?;
    Ok((e.value, e.grad.expect("requested")))
}

fn check_dims<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(Error::dim(
            "sliced_wasserstein",
            format!("x {:?} vs y {:?}", x.shape(), y.shape()),
        ));
    }
    Ok(())
}
