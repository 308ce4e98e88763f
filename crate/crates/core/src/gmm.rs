//! Full-covariance Gaussian mixture fitted by expectation–maximization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky, forward_substitute};
use crate::rng;
use crate::scalar::{ln_two_pi, log_sum_exp, Scalar};

/// EM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative improvement of the mean log-likelihood drops below this.
    pub tolerance: f64,
    /// Added to every covariance diagonal in each M-step.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            tolerance: 1e-6,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.tolerance > 0.0) || !(self.ridge > 0.0) {
            return Err(Error::invalid("tolerance and ridge must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Component<T> {
    mean: Vec<T>,
    covariance: Vec<T>,
    chol: Vec<T>,
    /// `-0.5 (d ln 2π + ln det Σ)`
    log_norm: T,
}

impl<T: Scalar> Component<T> {
    fn new(mean: Vec<T>, covariance: Vec<T>) -> Result<Self> {
        let d = mean.len();
        let chol = cholesky(&covariance, d).ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
        let log_norm = -T::of(0.5) * (T::of_usize(d) * ln_two_pi::<T>() + chol_logdet(&chol, d));
        Ok(Component {
            mean,
            covariance,
            chol,
            log_norm,
        })
    }

    fn log_density(&self, z: &[T], scratch: &mut Vec<T>) -> T {
        let d = self.mean.len();
        scratch.clear();
        scratch.extend(z.iter().zip(&self.mean).map(|(&a, &b)| a - b));
        forward_substitute(&self.chol, d, scratch);
        let maha: T = scratch.iter().map(|&v| v * v).sum();
        self.log_norm - T::of(0.5) * maha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel<T> {
    d: usize,
    weights: Vec<T>,
    components: Vec<Component<T>>,
    /// Settings the model was fitted with, if any.
    pub fit_config: Option<EmConfig>,
}

impl<T: Scalar> GmmModel<T> {
    /// `covariances` are row-major `d x d` matrices.
    pub fn new(weights: Vec<T>, means: Vec<Vec<T>>, covariances: Vec<Vec<T>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid(
                "weights, means and covariances must have equal, non-zero length",
            ));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::invalid("dimension must be >= 1"));
        }
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: m.len(),
                });
            }
            if c.len() != d * d {
                return Err(Error::DimensionMismatch {
                    expected: d * d,
                    got: c.len(),
                });
            }
        }
        let total: T = weights.iter().copied().sum();
        let slack = T::of(1e-9).max(T::epsilon() * T::of_usize(4 * weights.len()));
        if weights.iter().any(|&w| w < T::zero() || !w.is_finite()) || (total - T::one()).abs() > slack {
            return Err(Error::invalid("weights must be non-negative and sum to 1"));
        }
        let components = means
            .into_iter()
            .zip(covariances)
            .map(|(m, c)| Component::new(m, c))
            .collect::<Result<_>>()?;
        Ok(GmmModel {
            d,
            weights,
            components,
            fit_config: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn mean(&self, j: usize) -> &[T] {
        &self.components[j].mean
    }

    pub fn covariance(&self, j: usize) -> &[T] {
        &self.components[j].covariance
    }

    /// Free parameters: mixing weights, means and symmetric covariances.
    pub fn n_params(&self) -> usize {
        let (k, d) = (self.k(), self.d);
        (k - 1) + k * d + k * d * (d + 1) / 2
    }

    /// `ln Σ_j π_j N(z; μ_j, Σ_j)`.
    pub fn log_density(&self, z: &[T]) -> Result<T> {
        if z.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: z.len(),
            });
        }
        let mut scratch = Vec::with_capacity(self.d);
        let mut terms = Vec::with_capacity(self.k());
        self.weighted_log_densities(z, &mut scratch, &mut terms);
        Ok(log_sum_exp(&terms))
    }

    fn weighted_log_densities(&self, z: &[T], scratch: &mut Vec<T>, out: &mut Vec<T>) {
        out.clear();
        out.extend(
            self.weights
                .iter()
                .zip(&self.components)
                .map(|(&w, c)| w.ln() + c.log_density(z, scratch)),
        );
    }
}

/// Result of [`gmm_fit`].
#[derive(Debug, Clone)]
pub struct GmmFit<T> {
    pub model: GmmModel<T>,
    /// Mean training log-likelihood of each evaluated parameter set; the
    /// last entry belongs to the returned model.
    pub log_likelihood_trace: Vec<T>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
}

fn check_data<T: Scalar>(data: &[Vec<T>]) -> Result<usize> {
    let d = data.first().map(Vec::len).unwrap_or(0);
    for row in data {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
    }
    if d == 0 && !data.is_empty() {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    Ok(d)
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn kmeans_pp<T: Scalar>(data: &[Vec<T>], k: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = rng::seeded(seed);
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0]).as_f64()).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data[pick].clone();
        for (dist, x) in nearest.iter_mut().zip(data) {
            *dist = dist.min(sq_dist(x, &c).as_f64());
        }
        centers.push(c);
    }
    centers
}

fn weighted_covariance<T: Scalar>(data: &[Vec<T>], resp: impl Fn(usize) -> T, mean: &[T], mass: T, ridge: T) -> Vec<T> {
    let d = mean.len();
    let mut cov = vec![T::zero(); d * d];
    let mut diff = vec![T::zero(); d];
    for (i, x) in data.iter().enumerate() {
        let r = resp(i);
        if r == T::zero() {
            continue;
        }
        for (t, (&a, &m)) in diff.iter_mut().zip(x.iter().zip(mean)) {
            *t = a - m;
        }
        for a in 0..d {
            let ra = r * diff[a];
            for b in 0..=a {
                cov[a * d + b] = cov[a * d + b] + ra * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = cov[a * d + b] / mass;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
        cov[a * d + a] = cov[a * d + a] + ridge;
    }
    cov
}

/// Fits a `k`-component full-covariance mixture to `data` (rows of length d).
///
/// Means start from k-means++ seeds, covariances from the pooled sample
/// covariance and weights uniform. Each M-step adds `ridge · I` to every
/// covariance. Iteration stops when the relative change of the mean
/// log-likelihood falls below `tolerance` or after `max_iters` M-steps.
pub fn gmm_fit<T: Scalar>(data: &[Vec<T>], k: usize, cfg: &EmConfig) -> Result<GmmFit<T>> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let n = data.len();
    if n < k {
        return Err(Error::TooFewSamples { n, k });
    }
    let d = check_data(data)?;
    let ridge = T::of(cfg.ridge);
    let n_t = T::of_usize(n);

    let pooled_mean: Vec<T> = (0..d).map(|a| data.iter().map(|x| x[a]).sum::<T>() / n_t).collect();
    let pooled_cov = weighted_covariance(data, |_| T::one(), &pooled_mean, n_t, ridge);
    let means = kmeans_pp(data, k, cfg.seed);
    let mut model = GmmModel::new(vec![T::one() / T::of_usize(k); k], means, vec![pooled_cov; k])?;

    let mut resp = vec![T::zero(); n * k];
    let mut terms = Vec::with_capacity(k);
    let mut scratch = Vec::with_capacity(d);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        // E-step
        let mut ll = T::zero();
        for (i, x) in data.iter().enumerate() {
            model.weighted_log_densities(x, &mut scratch, &mut terms);
            let lse = log_sum_exp(&terms);
            ll = ll + lse;
            for (j, &t) in terms.iter().enumerate() {
                resp[i * k + j] = (t - lse).exp();
            }
        }
        let mean_ll = ll / n_t;
        if !mean_ll.is_finite() {
            return Err(Error::NonFinite("EM log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            let prev: T = prev;
            if (mean_ll - prev).abs() <= T::of(cfg.tolerance) * prev.abs() {
                converged = true;
            }
        }
        trace.push(mean_ll);
        if converged || iterations == cfg.max_iters {
            break;
        }

        // M-step
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for j in 0..k {
            let mass: T = (0..n).map(|i| resp[i * k + j]).sum();
            weights.push(mass / n_t);
            if mass <= T::zero() {
                // Component lost all support; keep its shape so the mixture stays valid.
                means.push(model.components[j].mean.clone());
                covs.push(model.components[j].covariance.clone());
                continue;
            }
            let mean: Vec<T> = (0..d)
                .map(|a| (0..n).map(|i| resp[i * k + j] * data[i][a]).sum::<T>() / mass)
                .collect();
            covs.push(weighted_covariance(data, |i| resp[i * k + j], &mean, mass, ridge));
            means.push(mean);
        }
        let total: T = weights.iter().copied().sum();
        weights.iter_mut().for_each(|w| *w = *w / total);
        model = GmmModel::new(weights, means, covs)?;
        iterations += 1;
    }

    model.fit_config = Some(cfg.clone());
    Ok(GmmFit {
        model,
        log_likelihood_trace: trace,
        iterations,
        converged,
    })
}
