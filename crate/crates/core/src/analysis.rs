//! Spatial-correlation study: how the luma difference between a point and
//! its neighbours grows with their offset along one axis, and a Gaussian
//! fit of that relation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::solve4;
use crate::pcdata::PointCloud;
use crate::spatial_index::SpatialIndex;

/// Default bin width of the study.
pub const BIN_WIDTH: f64 = 0.5;
/// Default neighbourhood size.
pub const DEFAULT_G: usize = 200;

const MAX_ITERATIONS: usize = 200;
const REL_COST_TOL: f64 = 1e-10;
const MAX_DAMPING: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["x", "y", "z"][self.index()])
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Config(format!("unknown axis '{s}' (expected x, y or z)"))),
        }
    }
}

/// Signed axis offset of a neighbour and its absolute luma difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub axis: Axis,
    pub d: f64,
    pub dy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedPair {
    pub center: f64,
    pub mean_dy: f64,
    pub count: usize,
}

/// Picks one point at random (from `seed`) and pairs it with its `g`
/// nearest neighbours.
pub fn sample_neighborhood(pc: &PointCloud, g: usize, axis: Axis, seed: u64) -> Result<Vec<PairSample>> {
    let n = pc.len();
    if g == 0 || g >= n {
        return Err(Error::Config(format!("g must lie in [1, n) with n = {n}, got {g}")));
    }
    let index = SpatialIndex::build(pc.geometry())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs_around(pc, &index, rng.gen_range(0..n), g, axis))
}

fn pairs_around(pc: &PointCloud, index: &SpatialIndex, p: usize, g: usize, axis: Axis) -> Vec<PairSample> {
    let geo = pc.geometry();
    let attrs = pc.attributes();
    let a = axis.index();
    let found = index.nearest(&geo[p], g + 1).expect("g < n");
    found
        .into_iter()
        .map(|(_, q)| q as usize)
        .filter(|&q| q != p)
        .take(g)
        .map(|q| PairSample {
            axis,
            d: f64::from(geo[q][a]) - f64::from(geo[p][a]),
            dy: (f64::from(attrs[q][0]) - f64::from(attrs[p][0])).abs(),
        })
        .collect()
}

/// Uniform bins of width `bin_width` from the smallest to the largest
/// offset; the last bin ends at the maximum and may be narrower. Empty
/// bins are dropped.
pub fn bin_pairs(pairs: &[PairSample], bin_width: f64) -> Result<Vec<BinnedPair>> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to bin".into()));
    }
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let dmin = pairs.iter().map(|p| p.d).fold(f64::INFINITY, f64::min);
    let dmax = pairs.iter().map(|p| p.d).fold(f64::NEG_INFINITY, f64::max);
    let mut edges = vec![dmin];
    let mut i = 1.0;
    while dmin + i * bin_width < dmax {
        edges.push(dmin + i * bin_width);
        i += 1.0;
    }
    edges.push(dmax);
    let nbins = edges.len() - 1;
    let mut sums = vec![0f64; nbins];
    let mut counts = vec![0usize; nbins];
    for p in pairs {
        let b = (((p.d - dmin) / bin_width).floor() as usize).min(nbins - 1);
        sums[b] += p.dy;
        counts[b] += 1;
    }
    Ok((0..nbins)
        .filter(|&b| counts[b] > 0)
        .map(|b| BinnedPair {
            center: 0.5 * (edges[b] + edges[b + 1]),
            mean_dy: sums[b] / counts[b] as f64,
            count: counts[b],
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    DegenerateFlat,
}

/// `mean_dy(d) ≈ amplitude · exp(−(d − mean)² / (2 std²)) + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub mean: f64,
    pub std: f64,
    pub offset: f64,
    /// Squared count-weighted correlation between the bin means and the fit.
    pub r_squared: f64,
    pub status: FitStatus,
    pub iterations: usize,
    /// Weighted sum of squared residuals at the reported parameters.
    pub cost: f64,
    /// `‖Jᵀ W r‖` at the initial guess and at the result.
    pub initial_gradient_norm: f64,
    pub gradient_norm: f64,
}

impl GaussianFit {
    pub fn eval(&self, d: f64) -> f64 {
        model(&[self.amplitude, self.mean, self.std, self.offset], d)
    }
}

fn model(t: &[f64; 4], d: f64) -> f64 {
    let z = (d - t[1]) / t[2];
    t[0] * (-0.5 * z * z).exp() + t[3]
}

fn cost(bins: &[BinnedPair], t: &[f64; 4]) -> f64 {
    bins.iter()
        .map(|b| {
            let r = b.mean_dy - model(t, b.center);
            b.count as f64 * r * r
        })
        .sum()
}

/// Normal equations `JᵀWJ` and `JᵀWr`.
fn normal_equations(bins: &[BinnedPair], t: &[f64; 4]) -> ([[f64; 4]; 4], [f64; 4]) {
    let mut a = [[0f64; 4]; 4];
    let mut g = [0f64; 4];
    for b in bins {
        let (d, w) = (b.center, b.count as f64);
        let u = d - t[1];
        let e = (-0.5 * u * u / (t[2] * t[2])).exp();
        let j = [e, t[0] * e * u / (t[2] * t[2]), t[0] * e * u * u / (t[2] * t[2] * t[2]), 1.0];
        let r = b.mean_dy - (t[0] * e + t[3]);
        for p in 0..4 {
            g[p] += w * j[p] * r;
            for q in 0..4 {
                a[p][q] += w * j[p] * j[q];
            }
        }
    }
    (a, g)
}

fn norm(v: &[f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn weighted_r_squared(bins: &[BinnedPair], t: &[f64; 4]) -> f64 {
    let w: f64 = bins.iter().map(|b| b.count as f64).sum();
    let my = bins.iter().map(|b| b.count as f64 * b.mean_dy).sum::<f64>() / w;
    let mf = bins.iter().map(|b| b.count as f64 * model(t, b.center)).sum::<f64>() / w;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for b in bins {
        let c = b.count as f64;
        let (x, y) = (b.mean_dy - my, model(t, b.center) - mf);
        sxy += c * x * y;
        sxx += c * x * x;
        syy += c * y * y;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).min(1.0)
}

/// Levenberg–Marquardt fit of a Gaussian with offset, each bin weighted by
/// its count.
pub fn fit_gaussian(bins: &[BinnedPair]) -> Result<GaussianFit> {
    if bins.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 bins to fit 4 parameters, got {}", bins.len())));
    }
    if bins.iter().any(|b| b.count == 0 || !b.center.is_finite() || !b.mean_dy.is_finite()) {
        return Err(Error::Fit("bins must have positive counts and finite values".into()));
    }
    let (lo, hi) = bins.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), b| (l.min(b.mean_dy), h.max(b.mean_dy)));
    let cmin = bins.iter().map(|b| b.center).fold(f64::INFINITY, f64::min);
    let cmax = bins.iter().map(|b| b.center).fold(f64::NEG_INFINITY, f64::max);
    let spread = if cmax > cmin { (cmax - cmin) / 4.0 } else { 1.0 };

    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        let t = [0.0, 0.5 * (cmin + cmax), spread, lo];
        return Ok(GaussianFit {
            amplitude: 0.0,
            mean: t[1],
            std: spread,
            offset: lo,
            r_squared: 0.0,
            status: FitStatus::DegenerateFlat,
            iterations: 0,
            cost: cost(bins, &t),
            initial_gradient_norm: 0.0,
            gradient_norm: 0.0,
        });
    }

    let peak = bins.iter().max_by(|a, b| a.mean_dy.total_cmp(&b.mean_dy)).unwrap().center;
    let mut t = [hi - lo, peak, spread, lo];
    let mut c = cost(bins, &t);
    let (_, g0) = normal_equations(bins, &t);
    let initial_gradient_norm = norm(&g0);
    let mut lambda = 1e-3;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if c == 0.0 {
            status = FitStatus::Converged;
            break;
        }
        let (a, g) = normal_equations(bins, &t);
        let scale = a.iter().enumerate().map(|(i, r)| r[i]).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        while lambda <= MAX_DAMPING {
            let mut damped = a;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * row[i].max(1e-12 * scale);
            }
            let step = solve4(damped, g);
            if let Some(step) = step {
                let trial = [t[0] + step[0], t[1] + step[1], t[2] + step[2], t[3] + step[3]];
                let tc = cost(bins, &trial);
                if trial[2] != 0.0 && tc.is_finite() && tc <= c {
                    let rel = (c - tc) / c;
                    t = trial;
                    c = tc;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < REL_COST_TOL {
                        status = FitStatus::Converged;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No damping level reduces the cost: a minimum to working precision.
            status = FitStatus::Converged;
            break;
        }
        if status == FitStatus::Converged {
            break;
        }
    }
    t[2] = t[2].abs();
    let (_, g) = normal_equations(bins, &t);
    Ok(GaussianFit {
        amplitude: t[0],
        mean: t[1],
        std: t[2],
        offset: t[3],
        r_squared: weighted_r_squared(bins, &t),
        status,
        iterations,
        cost: c,
        initial_gradient_norm,
        gradient_norm: norm(&g),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisStudy {
    pub axis: Axis,
    pub pairs: Vec<PairSample>,
    /// Bins of every run, pooled.
    pub bins: Vec<BinnedPair>,
    pub fit: Option<GaussianFit>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub g: usize,
    pub runs: usize,
    pub seed: u64,
    pub bin_width: f64,
    /// Index of the sampled point in each run.
    pub sampled_points: Vec<usize>,
    pub axes: Vec<AxisStudy>,
}

/// `n_runs` seeded samplings; run `r` samples its point with seed
/// `seed + r` and uses it for every axis. Bins of all runs are pooled and
/// fitted once per axis.
pub fn run_experiment(pc: &PointCloud, g: usize, axes: &[Axis], n_runs: usize, seed: u64) -> Result<StudyReport> {
    let n = pc.len();
    if g == 0 || g >= n {
        return Err(Error::Config(format!("g must lie in [1, n) with n = {n}, got {g}")));
    }
    if n_runs == 0 || axes.is_empty() {
        return Err(Error::Config("need at least one run and one axis".into()));
    }
    let index = SpatialIndex::build(pc.geometry())?;
    let sampled: Vec<usize> = (0..n_runs as u64)
        .map(|r| ChaCha8Rng::seed_from_u64(seed.wrapping_add(r)).gen_range(0..n))
        .collect();
    let mut studies = Vec::with_capacity(axes.len());
    for &axis in axes {
        let mut pairs = Vec::new();
        let mut bins = Vec::new();
        for &p in &sampled {
            let run = pairs_around(pc, &index, p, g, axis);
            bins.extend(bin_pairs(&run, BIN_WIDTH)?);
            pairs.extend(run);
        }
        let (fit, error) = match fit_gaussian(&bins) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        studies.push(AxisStudy { axis, pairs, bins, fit, error });
    }
    Ok(StudyReport { g, runs: n_runs, seed, bin_width: BIN_WIDTH, sampled_points: sampled, axes: studies })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(d: f64, dy: f64) -> PairSample {
        PairSample { axis: Axis::X, d, dy }
    }

    #[test]
    fn binning_example() {
        let bins = bin_pairs(&[pair(0.0, 2.0), pair(0.3, 4.0), pair(0.7, 6.0)], 0.5).unwrap();
        assert_eq!(bins.len(), 2);
        assert!((bins[0].center - 0.25).abs() < 1e-12 && bins[0].mean_dy == 3.0 && bins[0].count == 2);
        assert!((bins[1].center - 0.6).abs() < 1e-12 && bins[1].mean_dy == 6.0 && bins[1].count == 1);
    }

    #[test]
    fn single_offset_is_one_bin() {
        let bins = bin_pairs(&[pair(2.0, 1.0), pair(2.0, 3.0)], 0.5).unwrap();
        assert_eq!(bins, vec![BinnedPair { center: 2.0, mean_dy: 2.0, count: 2 }]);
        assert!(bin_pairs(&[], 0.5).is_err());
    }

    #[test]
    fn exact_model_recovery() {
        let truth = [40.0, 0.0, 3.0, 5.0];
        let bins: Vec<_> = (-20..=20)
            .map(|i| {
                let d = f64::from(i) * 0.5;
                BinnedPair { center: d, mean_dy: model(&truth, d), count: 1 + (i as usize % 3) }
            })
            .collect();
        let f = fit_gaussian(&bins).unwrap();
        assert_eq!(f.status, FitStatus::Converged);
        for (got, want) in [f.amplitude, f.mean, f.std, f.offset].iter().zip(truth) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!(f.r_squared >= 1.0 - 1e-9);
    }

    #[test]
    fn flat_data_is_flagged() {
        let bins: Vec<_> = (0..6).map(|i| BinnedPair { center: f64::from(i), mean_dy: 7.0, count: 2 }).collect();
        let f = fit_gaussian(&bins).unwrap();
        assert_eq!(f.status, FitStatus::DegenerateFlat);
        assert_eq!((f.offset, f.r_squared), (7.0, 0.0));
        assert!(fit_gaussian(&bins[..3]).is_err());
    }

    #[test]
    fn axis_parse() {
        assert_eq!("Y".parse::<Axis>().unwrap(), Axis::Y);
        assert!("w".parse::<Axis>().is_err());
    }
}
