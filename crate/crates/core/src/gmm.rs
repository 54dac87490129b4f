//! Full-covariance Gaussian mixtures fitted by expectation-maximization.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per parallel E-step block. Partial sums are reduced in block
/// order, so results do not depend on the thread count.
const BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Mixture components per class.
    #[serde(rename = "k")]
    pub k_per_class: usize,
    pub max_iters: usize,
    /// Stop once the relative log-likelihood gain drops below this.
    pub tol: f64,
    /// Lower bound applied to every covariance diagonal entry.
    pub cov_floor: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k_per_class: 15,
            max_iters: 200,
            tol: 1e-6,
            cov_floor: 1e-6,
            restarts: 3,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_class == 0 || self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config(
                "k, max_iters and restarts must be positive".into(),
            ));
        }
        if !(self.tol > 0.0) || !(self.cov_floor > 0.0) {
            return Err(Error::Config("tol and cov_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    /// Row-major lower Cholesky factor of the covariance.
    chol: Vec<f64>,
    /// `-(d ln 2pi + ln det S) / 2`.
    log_gauss_norm: f64,
    log_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GmmRecord {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

/// Mixture `sum_j w_j N(x; mu_j, S_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRecord", into = "GmmRecord")]
pub struct Gmm {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    components: Vec<Component>,
}

impl TryFrom<GmmRecord> for Gmm {
    type Error = Error;

    fn try_from(r: GmmRecord) -> Result<Self> {
        Gmm::new(r.weights, r.means, r.covariances)
    }
}

impl From<Gmm> for GmmRecord {
    fn from(g: Gmm) -> Self {
        GmmRecord {
            weights: g.weights,
            means: g.means,
            covariances: g.covariances,
        }
    }
}

fn cholesky(cov: &[Vec<f64>]) -> Option<(Vec<f64>, f64)> {
    let d = cov.len();
    let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
    let l = m.cholesky()?.unpack();
    let mut flat = vec![0.0; d * d];
    let mut log_det = 0.0;
    for i in 0..d {
        for j in 0..=i {
            flat[i * d + j] = l[(i, j)];
        }
        log_det += 2.0 * l[(i, i)].ln();
    }
    log_det.is_finite().then_some((flat, log_det))
}

/// `ln` of a sum of exponentials, summed in descending order so the result
/// does not depend on the order of `terms`.
pub(crate) fn log_sum_exp(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(|a, b| b.total_cmp(a));
    let top = terms[0];
    if top == f64::NEG_INFINITY {
        return top;
    }
    let s: f64 = terms.iter().map(|t| (t - top).exp()).sum();
    top + s.ln()
}

impl Gmm {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::Model(
                "mixture needs matching, non-empty component lists".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Model("mixture dimension must be positive".into()));
        }
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim || c.len() != dim || c.iter().any(|row| row.len() != dim) {
                return Err(Error::Model("inconsistent component dimensions".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Model("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Model(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let components = weights
            .iter()
            .zip(&covariances)
            .enumerate()
            .map(|(j, (&w, cov))| {
                let (chol, log_det) =
                    cholesky(cov).ok_or(Error::SingularComponent { component: j })?;
                Ok(Component {
                    chol,
                    log_gauss_norm: -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
                    log_weight: w.ln(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<Vec<f64>>] {
        &self.covariances
    }

    /// Same mixture with its components listed in `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Gmm> {
        Gmm::new(
            order.iter().map(|&j| self.weights[j]).collect(),
            order.iter().map(|&j| self.means[j].clone()).collect(),
            order.iter().map(|&j| self.covariances[j].clone()).collect(),
        )
    }

    /// `ln(w_j N(x; mu_j, S_j))`, using `scratch` of length `d`.
    #[inline]
    fn weighted_log_density(&self, j: usize, x: &[f64], scratch: &mut [f64]) -> f64 {
        let c = &self.components[j];
        c.log_weight + c.log_gauss_norm - 0.5 * self.mahalanobis(j, x, scratch)
    }

    /// Squared Mahalanobis distance to component `j` by forward substitution.
    #[inline]
    fn mahalanobis(&self, j: usize, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.dim;
        let c = &self.components[j];
        let mean = &self.means[j];
        let mut maha = 0.0;
        for i in 0..d {
            let row = &c.chol[i * d..i * d + i];
            let mut v = x[i] - mean[i];
            for (l, z) in row.iter().zip(&scratch[..i]) {
                v -= l * z;
            }
            v /= c.chol[i * d + i];
            scratch[i] = v;
            maha += v * v;
        }
        maha
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dims((self.dim, 1), (x.len(), 1)));
        }
        Ok(())
    }

    /// Unweighted density of component `j` at `x`.
    pub fn component_pdf(&self, j: usize, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut scratch = vec![0.0; self.dim];
        let c = &self.components[j];
        Ok((c.log_gauss_norm - 0.5 * self.mahalanobis(j, x, &mut scratch)).exp())
    }

    /// `ln p(x)`; `scratch` must hold at least `d + k` values.
    pub(crate) fn log_pdf_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let (z, terms) = scratch.split_at_mut(self.dim);
        let terms = &mut terms[..self.k()];
        for (j, t) in terms.iter_mut().enumerate() {
            *t = self.weighted_log_density(j, x, z);
        }
        log_sum_exp(terms)
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut scratch = vec![0.0; self.dim + self.k()];
        Ok(self.log_pdf_with(x, &mut scratch))
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        self.log_pdf(x).map(f64::exp)
    }
}

/// Mixture density at `x`.
pub fn gmm_pdf(model: &Gmm, x: &[f64]) -> Result<f64> {
    model.pdf(x)
}

/// Outcome of [`fit_gmm_traced`].
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: Gmm,
    /// Training log-likelihood after each E-step, one list per restart.
    pub histories: Vec<Vec<f64>>,
    /// Index of the restart that produced `model`.
    pub best_restart: usize,
}

pub fn fit_gmm(samples: &[Vec<f64>], cfg: &EmConfig) -> Result<Gmm> {
    fit_gmm_traced(samples, cfg).map(|r| r.model)
}

pub fn fit_gmm_traced(samples: &[Vec<f64>], cfg: &EmConfig) -> Result<FitReport> {
    cfg.validate()?;
    let d = samples.first().map_or(0, |s| s.len());
    let required = cfg.k_per_class * (d + 1);
    if d == 0 || samples.len() < required {
        return Err(Error::TooFewSamples {
            samples: samples.len(),
            required: required.max(1),
        });
    }
    if samples
        .iter()
        .any(|s| s.len() != d || s.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Config(
            "training samples must be finite and of equal length".into(),
        ));
    }
    let data: Vec<f64> = samples.iter().flatten().copied().collect();
    let data = Samples { d, data: &data };

    let mut best: Option<(f64, Gmm, usize)> = None;
    let mut histories = Vec::with_capacity(cfg.restarts);
    for restart in 0..cfg.restarts {
        let seed = cfg
            .seed
            .wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = kmeans_pp_init(&data, cfg, &mut rng)?;
        let (model, history) = run_em(&data, init, cfg)?;
        let final_ll = *history.last().expect("at least one E-step");
        if best.as_ref().map_or(true, |(ll, _, _)| final_ll > *ll) {
            best = Some((final_ll, model, restart));
        }
        histories.push(history);
    }
    let (_, model, best_restart) = best.expect("restarts >= 1");
    Ok(FitReport {
        model,
        histories,
        best_restart,
    })
}

struct Samples<'a> {
    d: usize,
    data: &'a [f64],
}

impl Samples<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.d
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by one hard assignment to derive initial
/// weights, means and covariances.
fn kmeans_pp_init(data: &Samples, cfg: &EmConfig, rng: &mut ChaCha8Rng) -> Result<Gmm> {
    let (n, d, k) = (data.len(), data.d, cfg.k_per_class);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(data.row(rng.random_range(0..n)).to_vec());
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(data.row(i), &c));
        }
        centers.push(c);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        let x = data.row(i);
        let j = (0..k)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
            .unwrap();
        members[j].push(i);
    }
    let global = moments(data, &(0..n).collect::<Vec<_>>(), d);
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for (j, idx) in members.iter().enumerate() {
        // Tiny clusters borrow the global spread around their own centre.
        let (mean, mut cov) = if idx.len() > d {
            moments(data, idx, d)
        } else {
            (centers[j].clone(), global.1.clone())
        };
        floor_diagonal(&mut cov, cfg.cov_floor);
        weights.push(idx.len().max(1) as f64);
        means.push(mean);
        covs.push(cov);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Gmm::new(weights, means, covs)
}

fn moments(data: &Samples, idx: &[usize], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for &i in idx {
        let x = data.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= n);
    (mean, cov)
}

fn floor_diagonal(cov: &mut [Vec<f64>], floor: f64) {
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] = row[i].max(floor);
    }
}

/// Sufficient statistics of one E-step block.
struct Partial {
    ll: f64,
    nk: Vec<f64>,
    /// Per component: responsibility-weighted sum of `x`.
    sx: Vec<f64>,
    /// Per component: weighted scatter about the current mean, `d x d`.
    sxx: Vec<f64>,
}

fn e_step(data: &Samples, model: &Gmm) -> Partial {
    let (d, k) = (data.d, model.k());
    let n = data.len();
    let blocks: Vec<Partial> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut p = Partial {
                ll: 0.0,
                nk: vec![0.0; k],
                sx: vec![0.0; k * d],
                sxx: vec![0.0; k * d * d],
            };
            let mut z = vec![0.0; d];
            let mut logs = vec![0.0; k];
            let mut sorted = vec![0.0; k];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                let x = data.row(i);
                for (j, l) in logs.iter_mut().enumerate() {
                    *l = model.weighted_log_density(j, x, &mut z);
                }
                sorted.copy_from_slice(&logs);
                let lse = log_sum_exp(&mut sorted);
                p.ll += lse;
                for (j, &l) in logs.iter().enumerate() {
                    let r = (l - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    p.nk[j] += r;
                    let mean = &model.means[j];
                    for a in 0..d {
                        p.sx[j * d + a] += r * x[a];
                        let da = x[a] - mean[a];
                        for c in 0..=a {
                            p.sxx[(j * d + a) * d + c] += r * da * (x[c] - mean[c]);
                        }
                    }
                }
            }
            p
        })
        .collect();
    let mut total = Partial {
        ll: 0.0,
        nk: vec![0.0; k],
        sx: vec![0.0; k * d],
        sxx: vec![0.0; k * d * d],
    };
    for p in blocks {
        total.ll += p.ll;
        total.nk.iter_mut().zip(&p.nk).for_each(|(a, b)| *a += b);
        total.sx.iter_mut().zip(&p.sx).for_each(|(a, b)| *a += b);
        total.sxx.iter_mut().zip(&p.sxx).for_each(|(a, b)| *a += b);
    }
    total
}

fn m_step(stats: &Partial, model: &Gmm, d: usize, floor: f64) -> Result<Gmm> {
    let k = model.k();
    let n_total: f64 = stats.nk.iter().sum();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let nk = stats.nk[j];
        weights.push(nk / n_total);
        if nk < 1e-10 {
            // Collapsed component: keep its shape, its weight is ~0.
            means.push(model.means[j].clone());
            covs.push(model.covariances[j].clone());
            continue;
        }
        let old = &model.means[j];
        let mean: Vec<f64> = (0..d).map(|a| stats.sx[j * d + a] / nk).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for a in 0..d {
            for c in 0..=a {
                let v =
                    stats.sxx[(j * d + a) * d + c] / nk - (mean[a] - old[a]) * (mean[c] - old[c]);
                cov[a][c] = v;
                cov[c][a] = v;
            }
        }
        floor_diagonal(&mut cov, floor);
        means.push(mean);
        covs.push(cov);
    }
    // Renormalize so the weights sum to one to the last bit we can manage.
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    Gmm::new(weights, means, covs)
}

fn run_em(data: &Samples, init: Gmm, cfg: &EmConfig) -> Result<(Gmm, Vec<f64>)> {
    let mut model = init;
    let mut history = Vec::new();
    for iter in 0..cfg.max_iters {
        let stats = e_step(data, &model);
        if let Some(&prev) = history.last() {
            let gain = (stats.ll - prev) / f64::abs(prev).max(f64::MIN_POSITIVE);
            history.push(stats.ll);
            if gain < cfg.tol {
                break;
            }
        } else {
            history.push(stats.ll);
        }
        if iter + 1 == cfg.max_iters {
            break;
        }
        model = m_step(&stats, &model, data.d, cfg.cov_floor)?;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn identity_gmm(d: usize) -> Gmm {
        let eye: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Gmm::new(vec![1.0], vec![vec![0.0; d]], vec![eye]).unwrap()
    }

    #[test]
    fn standard_normal_peak() {
        let g = identity_gmm(2);
        let p = gmm_pdf(&g, &[0.0, 0.0]).unwrap();
        assert!((p - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((p - 0.15915).abs() < 1e-5);
        assert!(gmm_pdf(&g, &[0.0]).is_err());
    }

    #[test]
    fn mixture_is_weighted_sum_of_components() {
        let g = Gmm::new(
            vec![0.25, 0.75],
            vec![vec![0.0, 1.0], vec![2.0, -1.0]],
            vec![
                vec![vec![1.0, 0.3], vec![0.3, 2.0]],
                vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            ],
        )
        .unwrap();
        for x in [[0.0, 0.0], [1.0, -0.5], [3.0, 2.0]] {
            let direct =
                0.25 * g.component_pdf(0, &x).unwrap() + 0.75 * g.component_pdf(1, &x).unwrap();
            let p = gmm_pdf(&g, &x).unwrap();
            assert!((p - direct).abs() <= 1e-15 * p.max(1e-300) * 10.0);
        }
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(Gmm::new(vec![0.5], vec![vec![0.0]], vec![vec![vec![1.0]]]).is_err());
        assert!(matches!(
            Gmm::new(vec![1.0], vec![vec![0.0]], vec![vec![vec![-1.0]]]),
            Err(Error::SingularComponent { component: 0 })
        ));
    }

    #[test]
    fn single_component_recovers_sample_moments() {
        let cfg = EmConfig {
            k_per_class: 1,
            restarts: 1,
            ..EmConfig::default()
        };
        let g = fit_gmm(&[vec![0.0], vec![2.0]], &cfg).unwrap();
        assert_eq!(g.weights(), &[1.0]);
        assert!((g.means()[0][0] - 1.0).abs() < 1e-12);
        assert!((g.covariances()[0][0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let cfg = EmConfig {
            k_per_class: 3,
            ..EmConfig::default()
        };
        let samples = vec![vec![0.0, 1.0]; 8];
        assert!(matches!(
            fit_gmm(&samples, &cfg),
            Err(Error::TooFewSamples { required: 9, .. })
        ));
    }

    fn two_bumps(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let left = Normal::new(-3.0, 1.0).unwrap();
        let right = Normal::new(3.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let x = if rng.random::<bool>() {
                    left.sample(&mut rng)
                } else {
                    right.sample(&mut rng)
                };
                vec![x]
            })
            .collect()
    }

    #[test]
    fn recovers_two_separated_bumps() {
        let cfg = EmConfig {
            k_per_class: 2,
            seed: 1,
            ..EmConfig::default()
        };
        let g = fit_gmm(&two_bumps(99, 500), &cfg).unwrap();
        let mut m: Vec<f64> = g.means().iter().map(|v| v[0]).collect();
        m.sort_by(f64::total_cmp);
        assert!(
            (m[0] + 3.0).abs() < 0.5 && (m[1] - 3.0).abs() < 0.5,
            "{m:?}"
        );
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let cfg = EmConfig {
            k_per_class: 4,
            seed: 5,
            ..EmConfig::default()
        };
        let report = fit_gmm_traced(&two_bumps(7, 400), &cfg).unwrap();
        for h in &report.histories {
            for w in h.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }
        assert_eq!(report.histories.len(), 3);
    }

    #[test]
    fn fitting_is_deterministic() {
        let cfg = EmConfig {
            k_per_class: 3,
            seed: 11,
            ..EmConfig::default()
        };
        let data = two_bumps(3, 300);
        assert_eq!(fit_gmm(&data, &cfg).unwrap(), fit_gmm(&data, &cfg).unwrap());
    }

    #[test]
    fn serde_round_trip_preserves_model() {
        let cfg = EmConfig {
            k_per_class: 2,
            restarts: 1,
            ..EmConfig::default()
        };
        let g = fit_gmm(&two_bumps(1, 200), &cfg).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: Gmm = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn log_sum_exp_is_order_free() {
        let mut a = [-1.0, -1000.0, 3.5, 0.25];
        let mut b = [0.25, 3.5, -1000.0, -1.0];
        assert_eq!(log_sum_exp(&mut a), log_sum_exp(&mut b));
        let mut none = [f64::NEG_INFINITY; 3];
        assert_eq!(log_sum_exp(&mut none), f64::NEG_INFINITY);
    }
}
