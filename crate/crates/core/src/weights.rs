//! Online tuning of the composition weights: Euclidean simplex projection,
//! a Gaussian-process surrogate over flattened weight vectors, the
//! expected-improvement acquisition, and the probe-training performance
//! evaluator.
//!
//! The learner proposes weight settings by maximizing expected improvement
//! over a cloud of Dirichlet-sampled candidates plus local perturbations of
//! the incumbent, every candidate projected back onto the product of the
//! three weight simplices. Performance of a setting is the validation
//! accuracy of a freshly trained probe model on the subset selected so far.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricWeights;
use crate::mlp::{Activation, MlpModel, OutputKind};
use crate::train::{accuracy, train_classifier, TrainConfig};

/// RBF kernel length scale on flattened weight vectors.
pub const KERNEL_LENGTH_SCALE: f64 = 0.3;

/// RBF kernel signal variance (prior variance far from data).
pub const KERNEL_SIGNAL_VARIANCE: f64 = 1.0;

/// Initial diagonal jitter; escalated tenfold on Cholesky failure.
pub const BASE_JITTER: f64 = 1e-6;

const MAX_CHOLESKY_ATTEMPTS: usize = 3;

/// Number of most recent observations used to standardize performances
/// before fitting the surrogate.
const STANDARDIZATION_WINDOW: usize = 8;

/// Below this predictive standard deviation the acquisition degenerates to
/// pure exploitation, max(mean - best, 0).
const EI_STD_FLOOR: f64 = 1e-12;

/// Euclidean projection onto the probability simplex {w >= 0, sum w = 1}
/// by the sort-and-threshold rule.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumulative = 0.0;
    let mut threshold = sorted[0] - 1.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (j as f64 + 1.0);
        if u - t > 0.0 {
            threshold = t;
        }
    }
    v.iter().map(|x| (x - threshold).max(0.0)).collect()
}

/// Projects each weight group (layer mix, layer-metric mix, global-metric
/// mix) onto its own simplex.
pub fn project_weight_groups(w: &MetricWeights) -> MetricWeights {
    let layer = project_to_simplex(&w.layer);
    let lm = project_to_simplex(&w.layer_metric);
    let gm = project_to_simplex(&w.global_metric);
    MetricWeights {
        layer,
        layer_metric: [lm[0], lm[1], lm[2]],
        global_metric: [gm[0], gm[1], gm[2]],
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement of a Gaussian posterior (mean, std_dev) over the
/// best value seen, maximization convention:
/// EI = (m - best) Phi(z) + s phi(z), z = (m - best)/s.
pub fn ei_value(mean: f64, std_dev: f64, best: f64) -> f64 {
    let gain = mean - best;
    if std_dev <= EI_STD_FLOOR {
        return gain.max(0.0);
    }
    let z = gain / std_dev;
    (gain * normal_cdf(z) + std_dev * normal_pdf(z)).max(0.0)
}

/// Exact GP regression with a fixed RBF kernel, fitted by hand-rolled
/// Cholesky factorization of K + jitter*I.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    length_scale: f64,
    signal_variance: f64,
    base_jitter: f64,
    x: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    jitter_used: f64,
}

impl Default for GpSurrogate {
    fn default() -> Self {
        GpSurrogate::with_params(KERNEL_LENGTH_SCALE, KERNEL_SIGNAL_VARIANCE, BASE_JITTER)
    }
}

impl GpSurrogate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(length_scale: f64, signal_variance: f64, base_jitter: f64) -> Self {
        GpSurrogate {
            length_scale,
            signal_variance,
            base_jitter,
            x: Vec::new(),
            chol: Vec::new(),
            alpha: Vec::new(),
            jitter_used: 0.0,
        }
    }

    pub fn is_fitted(&self) -> bool {
        !self.x.is_empty()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Jitter that made the last factorization succeed.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }

    /// Fits the posterior to (xs, ys). Cholesky failures escalate the
    /// jitter tenfold up to three attempts before giving up.
    pub fn fit(&mut self, xs: &[Vec<f64>], ys: &[f64]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Input("GP fit needs at least one observation".into()));
        }
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!(
                "{} inputs vs {} observations",
                xs.len(),
                ys.len()
            )));
        }
        let dim = xs[0].len();
        for (i, x) in xs.iter().enumerate() {
            if x.len() != dim {
                return Err(Error::Shape(format!(
                    "observation {i} has dimension {}, expected {dim}",
                    x.len()
                )));
            }
            if !x.iter().all(|v| v.is_finite()) || !ys[i].is_finite() {
                return Err(Error::Input(format!("observation {i} is not finite")));
            }
        }
        let n = xs.len();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let k = self.kernel(&xs[i], &xs[j]);
                gram[i][j] = k;
                gram[j][i] = k;
            }
        }
        let mut jitter = self.base_jitter;
        for _ in 0..MAX_CHOLESKY_ATTEMPTS {
            let mut a = gram.clone();
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += jitter;
            }
            if let Some(chol) = cholesky(&a) {
                let tmp = forward_solve(&chol, ys);
                self.alpha = back_solve(&chol, &tmp);
                self.chol = chol;
                self.x = xs.to_vec();
                self.jitter_used = jitter;
                return Ok(());
            }
            jitter *= 10.0;
        }
        Err(Error::Numerics(format!(
            "Cholesky factorization failed after {MAX_CHOLESKY_ATTEMPTS} jitter escalations \
             (last jitter {jitter:e})"
        )))
    }

    /// Posterior (mean, variance) at a query point; zero prior mean,
    /// variance clamped non-negative.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if !self.is_fitted() {
            return Err(Error::ColdStart("GP surrogate is not fitted".into()));
        }
        if x.len() != self.x[0].len() {
            return Err(Error::Shape(format!(
                "query dimension {} vs fitted {}",
                x.len(),
                self.x[0].len()
            )));
        }
        let kstar: Vec<f64> = self.x.iter().map(|xi| self.kernel(xi, x)).collect();
        let mean: f64 = kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_solve(&self.chol, &kstar);
        let explained: f64 = v.iter().map(|t| t * t).sum();
        let var = (self.signal_variance - explained).max(0.0);
        Ok((mean, var))
    }

    /// Expected improvement at a query point over `best`.
    pub fn expected_improvement(&self, x: &[f64], best: f64) -> Result<f64> {
        let (mean, var) = self.predict(x)?;
        Ok(ei_value(mean, var.sqrt(), best))
    }
}

/// Lower-triangular Cholesky factor, or None if the matrix is not
/// (numerically) positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solves L y = b for lower-triangular L.
fn forward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i][j] * y[j];
        }
        y[i] = s / l[i][i];
    }
    y
}

/// Solves L^T x = b for lower-triangular L.
fn back_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= l[j][i] * x[j];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// A candidate weight setting with its acquisition value.
#[derive(Debug, Clone)]
pub struct WeightProposal {
    pub weights: MetricWeights,
    pub expected_improvement: f64,
}

/// Knobs of the Bayesian weight optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightLearnerConfig {
    /// Stop after this many performance evaluations.
    pub max_evals: usize,
    /// An evaluation counts as progress only if it beats the best by this.
    pub min_improvement: f64,
    /// Consecutive no-progress evaluations tolerated before stopping.
    pub patience: usize,
    /// Dirichlet-sampled global candidates per proposal.
    pub dirichlet_candidates: usize,
    /// Local Gaussian perturbations of the incumbent per proposal, spread
    /// across `perturbation_scales`.
    pub perturbation_candidates: usize,
    /// Perturbation standard deviations, coarse to fine. Multiple scales
    /// let the acquisition refine the incumbent below the coarse step.
    pub perturbation_scales: Vec<f64>,
}

impl Default for WeightLearnerConfig {
    fn default() -> Self {
        WeightLearnerConfig {
            max_evals: 15,
            min_improvement: 0.002,
            patience: 3,
            dirichlet_candidates: 256,
            perturbation_candidates: 64,
            perturbation_scales: vec![0.05, 0.015, 0.005],
        }
    }
}

impl WeightLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_evals and patience must be positive".into(),
            ));
        }
        if !self.min_improvement.is_finite() || self.min_improvement < 0.0 {
            return Err(Error::Config(format!(
                "min_improvement must be non-negative, got {}",
                self.min_improvement
            )));
        }
        if self.perturbation_candidates > 0
            && (self.perturbation_scales.is_empty()
                || self.perturbation_scales.iter().any(|s| !(*s > 0.0)))
        {
            return Err(Error::Config(
                "perturbation_scales must be positive and non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform sample from the n-simplex (normalized unit exponentials).
fn sample_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n)
        .map(|_| -(rng.random::<f64>().max(1e-300)).ln())
        .collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn random_weights(rng: &mut ChaCha8Rng, num_layers: usize) -> MetricWeights {
    let lm = sample_simplex(rng, 3);
    let gm = sample_simplex(rng, 3);
    MetricWeights {
        layer: sample_simplex(rng, num_layers + 1),
        layer_metric: [lm[0], lm[1], lm[2]],
        global_metric: [gm[0], gm[1], gm[2]],
    }
}

fn perturbed_weights(rng: &mut ChaCha8Rng, base: &MetricWeights, sigma: f64) -> MetricWeights {
    let mut flat = base.flatten();
    for v in flat.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    let raw = MetricWeights::from_flat(base.num_layers(), &flat)
        .expect("flatten/from_flat round-trip");
    project_weight_groups(&raw)
}

/// Bayesian optimizer of the metric weights: observes (weights,
/// performance) pairs, keeps the best as incumbent, and proposes the EI
/// arg-max over Dirichlet candidates plus incumbent perturbations.
///
/// The surrogate is fitted on standardized performances ((y - mean)/std),
/// so the fixed unit signal variance describes the observed spread rather
/// than absolute accuracy; EI's arg-max is invariant under that affine
/// map and the reported improvement is scaled back to accuracy units.
#[derive(Debug, Clone)]
pub struct WeightLearner {
    config: WeightLearnerConfig,
    num_layers: usize,
    surrogate: GpSurrogate,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    y_shift: f64,
    y_scale: f64,
    incumbent: MetricWeights,
    best_performance: Option<f64>,
    evaluations: usize,
    stall: usize,
}

impl WeightLearner {
    pub fn new(num_layers: usize, config: WeightLearnerConfig) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        config.validate()?;
        Ok(WeightLearner {
            config,
            num_layers,
            surrogate: GpSurrogate::new(),
            xs: Vec::new(),
            ys: Vec::new(),
            y_shift: 0.0,
            y_scale: 1.0,
            incumbent: MetricWeights::uniform(num_layers),
            best_performance: None,
            evaluations: 0,
            stall: 0,
        })
    }

    /// Best-performing weights observed so far (uniform until the first
    /// observation).
    pub fn incumbent(&self) -> &MetricWeights {
        &self.incumbent
    }

    pub fn best_performance(&self) -> Option<f64> {
        self.best_performance
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// True once the evaluation budget is spent or `patience` consecutive
    /// evaluations failed to improve the best by `min_improvement`.
    pub fn converged(&self) -> bool {
        self.evaluations >= self.config.max_evals || self.stall >= self.config.patience
    }

    /// Records a performance measurement for a weight setting and refits
    /// the surrogate.
    pub fn observe(&mut self, weights: &MetricWeights, performance: f64) -> Result<()> {
        weights.validate()?;
        if weights.num_layers() != self.num_layers {
            return Err(Error::Shape(format!(
                "weights cover {} layers, learner expects {}",
                weights.num_layers(),
                self.num_layers
            )));
        }
        if !performance.is_finite() {
            return Err(Error::Input(format!(
                "performance {performance} is not finite"
            )));
        }
        self.xs.push(weights.flatten());
        self.ys.push(performance);
        // Standardize against the most recent observations only: as the
        // search concentrates, the recent spread shrinks, which amplifies
        // small local gains in standardized units and anneals the
        // constant exploration bonus that far candidates receive from the
        // unit prior variance.
        let recent = &self.ys[self.ys.len().saturating_sub(STANDARDIZATION_WINDOW)..];
        let n = recent.len() as f64;
        self.y_shift = recent.iter().sum::<f64>() / n;
        let var = recent
            .iter()
            .map(|y| (y - self.y_shift) * (y - self.y_shift))
            .sum::<f64>()
            / n;
        self.y_scale = var.sqrt().max(1e-6);
        let standardized: Vec<f64> = self
            .ys
            .iter()
            .map(|y| (y - self.y_shift) / self.y_scale)
            .collect();
        self.surrogate.fit(&self.xs, &standardized)?;
        match self.best_performance {
            None => {
                self.best_performance = Some(performance);
                self.incumbent = weights.clone();
            }
            Some(best) => {
                if performance > best + self.config.min_improvement {
                    self.stall = 0;
                } else {
                    self.stall += 1;
                }
                if performance > best {
                    self.best_performance = Some(performance);
                    self.incumbent = weights.clone();
                }
            }
        }
        self.evaluations += 1;
        Ok(())
    }

    /// EI arg-max over the candidate cloud; candidates must strictly beat
    /// the incumbent's own acquisition value, so an all-zero-EI field
    /// returns the incumbent.
    pub fn propose(&self, rng: &mut ChaCha8Rng) -> Result<WeightProposal> {
        if self.ys.is_empty() {
            return Err(Error::ColdStart(
                "weight proposal requires at least one observation".into(),
            ));
        }
        let best = self.best_performance.expect("set with first observation");
        let best_std = (best - self.y_shift) / self.y_scale;
        let mut winner = self.incumbent.clone();
        let mut winner_ei = self
            .surrogate
            .expected_improvement(&self.incumbent.flatten(), best_std)?;
        let mut consider = |cand: MetricWeights, surrogate: &GpSurrogate| -> Result<()> {
            let ei = surrogate.expected_improvement(&cand.flatten(), best_std)?;
            if ei > winner_ei {
                winner_ei = ei;
                winner = cand;
            }
            Ok(())
        };
        for _ in 0..self.config.dirichlet_candidates {
            consider(random_weights(rng, self.num_layers), &self.surrogate)?;
        }
        if self.config.perturbation_candidates > 0 {
            let scales = &self.config.perturbation_scales;
            for i in 0..self.config.perturbation_candidates {
                let sigma = scales[i % scales.len()];
                consider(
                    perturbed_weights(rng, &self.incumbent, sigma),
                    &self.surrogate,
                )?;
            }
        }
        Ok(WeightProposal {
            weights: winner,
            // Back in accuracy units.
            expected_improvement: winner_ei * self.y_scale,
        })
    }
}

/// Probe-training parameters for performance evaluation: a small fresh
/// model of the configured architecture trained for few epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 5,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "probe epochs and batch size must be positive".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "probe learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Trains a fresh probe classifier on `subset` and returns its validation
/// accuracy. Fully determined by `seed`.
pub fn evaluate_performance(
    subset: &[&Sample],
    validation: &[Sample],
    num_classes: usize,
    feature_dim: usize,
    hidden_layers: &[usize],
    activation: Activation,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Config("probe training subset is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::Config("probe validation set is empty".into()));
    }
    let mut dims = Vec::with_capacity(hidden_layers.len() + 2);
    dims.push(feature_dim);
    dims.extend_from_slice(hidden_layers);
    dims.push(num_classes);
    let mut model = MlpModel::new(&dims, activation, OutputKind::Softmax, seed)?;
    let mut rng = rand::SeedableRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let cfg = TrainConfig {
        epochs: probe.epochs,
        learning_rate: probe.learning_rate,
        batch_size: probe.batch_size,
    };
    train_classifier(&mut model, subset, &cfg, &mut rng)?;
    accuracy(&model, validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // ---- simplex projection ----

    #[test]
    fn projection_fixes_simplex_points() {
        let v = [0.2, 0.3, 0.5];
        let p = project_to_simplex(&v);
        for (a, b) in v.iter().zip(&p) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_hand_values() {
        assert_eq!(project_to_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 0.5]);
        for x in &p {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-12);
        }
        assert_eq!(project_to_simplex(&[1.5, -0.5]), vec![1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-10.0..10.0f64, 1..8)) {
            let p = project_to_simplex(&v);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            // Idempotent.
            let pp = project_to_simplex(&p);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // Order preserving.
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(p[i] >= p[j] - 1e-12);
                    }
                }
            }
        }
    }

    // ---- GP surrogate ----

    fn toy_observations(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut r = rng(seed);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| r.random::<f64>()).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (3.0 * x[0]).sin() + 0.25 * x.iter().sum::<f64>())
            .collect();
        (xs, ys)
    }

    #[test]
    fn gp_interpolates_observed_points() {
        let (xs, ys) = toy_observations(5, 3, 1);
        let mut gp = GpSurrogate::new();
        gp.fit(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (mean, var) = gp.predict(x).unwrap();
            assert!((mean - y).abs() < 1e-4, "mean {mean} vs observed {y}");
            assert!((0.0..1e-4).contains(&var), "variance {var}");
        }
    }

    #[test]
    fn gp_reverts_to_prior_far_away() {
        let (xs, ys) = toy_observations(5, 3, 2);
        let mut gp = GpSurrogate::new();
        gp.fit(&xs, &ys).unwrap();
        let (mean, var) = gp.predict(&[100.0, -50.0, 80.0]).unwrap();
        assert!(mean.abs() < 1e-10, "prior mean {mean}");
        assert_abs_diff_eq!(var, KERNEL_SIGNAL_VARIANCE, epsilon = 1e-10);
    }

    /// Independent oracle: textbook GP posterior via explicit matrix
    /// inversion (Gauss-Jordan with partial pivoting), no shared code with
    /// the Cholesky path.
    fn naive_gp_posterior(
        xs: &[Vec<f64>],
        ys: &[f64],
        q: &[f64],
        ell: f64,
        signal: f64,
        jitter: f64,
    ) -> (f64, f64) {
        let n = xs.len();
        let kern = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            signal * (-d2 / (2.0 * ell * ell)).exp()
        };
        // Build [K + jI | I] and invert by Gauss-Jordan.
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = kern(&xs[i], &xs[j]) + if i == j { jitter } else { 0.0 };
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    for j in 0..2 * n {
                        aug[row][j] -= f * aug[col][j];
                    }
                }
            }
        }
        let kinv: Vec<Vec<f64>> = aug.into_iter().map(|r| r[n..].to_vec()).collect();
        let kstar: Vec<f64> = xs.iter().map(|x| kern(x, q)).collect();
        let mut mean = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += kinv[i][j] * kstar[j];
            }
            mean += row * ys[i];
            quad += row * kstar[i];
        }
        (mean, signal - quad)
    }

    #[test]
    fn gp_matches_naive_inverse_oracle() {
        let mut r = rng(7);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random::<f64>()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin()).collect();
        let mut gp = GpSurrogate::new();
        gp.fit(&xs, &ys).unwrap();
        for i in 0..10 {
            let q = vec![i as f64 / 9.0];
            let (mean, var) = gp.predict(&q).unwrap();
            let (omean, ovar) = naive_gp_posterior(
                &xs,
                &ys,
                &q,
                KERNEL_LENGTH_SCALE,
                KERNEL_SIGNAL_VARIANCE,
                gp.jitter_used(),
            );
            assert!((mean - omean).abs() < 1e-8, "mean {mean} vs oracle {omean}");
            assert!((var - ovar.max(0.0)).abs() < 1e-8, "var {var} vs oracle {ovar}");
        }
    }

    #[test]
    fn gp_variance_shrinks_with_observations() {
        let (mut xs, mut ys) = toy_observations(4, 2, 3);
        let q = vec![0.3, 0.7];
        let mut gp = GpSurrogate::new();
        gp.fit(&xs, &ys).unwrap();
        let (_, before) = gp.predict(&q).unwrap();
        xs.push(q.clone());
        ys.push(0.5);
        gp.fit(&xs, &ys).unwrap();
        let (_, after) = gp.predict(&q).unwrap();
        assert!(
            after < before + 1e-9,
            "variance grew: {before} -> {after}"
        );
        assert!(after >= 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let indefinite = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(cholesky(&indefinite).is_none());
    }

    #[test]
    fn jitter_escalation_rescues_duplicate_rows() {
        // Exact duplicates make K singular. A 1e-17 jitter vanishes in
        // f64 addition (1 + 1e-17 == 1), so the first attempt fails and
        // the tenfold escalation to 1e-16 succeeds.
        let xs = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]];
        let ys = vec![0.2, 0.2, 0.2];
        let mut gp = GpSurrogate::with_params(0.3, 1.0, 1e-17);
        gp.fit(&xs, &ys).unwrap();
        assert!(gp.jitter_used() > 1e-17, "used {}", gp.jitter_used());
        let (mean, _) = gp.predict(&[0.5, 0.5]).unwrap();
        assert!((mean - 0.2).abs() < 1e-3);
    }

    #[test]
    fn unrecoverable_factorization_is_numerics_error() {
        // With an effectively zero jitter every escalation still vanishes
        // against the unit diagonal, so all three attempts fail.
        let xs = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let ys = vec![0.2, 0.2];
        let mut gp = GpSurrogate::with_params(0.3, 1.0, 1e-30);
        let err = gp.fit(&xs, &ys).unwrap_err();
        assert_eq!(err.class(), "numerics");
    }

    // ---- expected improvement ----

    #[test]
    fn ei_hand_values() {
        assert_eq!(ei_value(0.5, 0.0, 0.5), 0.0);
        assert_abs_diff_eq!(ei_value(0.5, 1.0, 0.5), 0.3989422804014327, epsilon = 1e-12);
        // Pure exploitation limit: m = best + 1, s -> 0.
        assert_abs_diff_eq!(ei_value(1.5, 1e-9, 0.5), 1.0, epsilon = 1e-6);
        assert_eq!(ei_value(0.3, 0.0, 0.5), 0.0);
    }

    proptest! {
        #[test]
        fn ei_is_non_negative(
            mean in -5.0..5.0f64,
            std in 0.0..3.0f64,
            best in -5.0..5.0f64,
        ) {
            prop_assert!(ei_value(mean, std, best) >= 0.0);
        }
    }

    // ---- weight learner ----

    #[test]
    fn single_observation_proposal_explores() {
        let mut learner = WeightLearner::new(2, WeightLearnerConfig::default()).unwrap();
        let uniform = MetricWeights::uniform(2);
        learner.observe(&uniform, 0.5).unwrap();
        let proposal = learner.propose(&mut rng(4)).unwrap();
        proposal.weights.validate().unwrap();
        let moved: f64 = proposal
            .weights
            .flatten()
            .iter()
            .zip(uniform.flatten())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(moved > 1e-6, "proposal did not move (L1 {moved})");
        assert!(proposal.expected_improvement > 0.0);
    }

    #[test]
    fn no_candidates_returns_incumbent() {
        let config = WeightLearnerConfig {
            dirichlet_candidates: 0,
            perturbation_candidates: 0,
            ..Default::default()
        };
        let mut learner = WeightLearner::new(2, config).unwrap();
        let uniform = MetricWeights::uniform(2);
        learner.observe(&uniform, 0.5).unwrap();
        let proposal = learner.propose(&mut rng(0)).unwrap();
        assert_eq!(proposal.weights.flatten(), uniform.flatten());
    }

    #[test]
    fn propose_before_observe_is_cold_start() {
        let learner = WeightLearner::new(2, WeightLearnerConfig::default()).unwrap();
        assert_eq!(
            learner.propose(&mut rng(0)).unwrap_err().class(),
            "cold_start"
        );
    }

    #[test]
    fn convergence_by_budget_and_patience() {
        let config = WeightLearnerConfig {
            max_evals: 50,
            min_improvement: 0.002,
            patience: 3,
            ..Default::default()
        };
        let mut learner = WeightLearner::new(1, config.clone()).unwrap();
        let w = MetricWeights::uniform(1);
        learner.observe(&w, 0.5).unwrap();
        assert!(!learner.converged());
        // Three stagnant evaluations trip the patience rule.
        for _ in 0..3 {
            learner.observe(&w, 0.5005).unwrap();
        }
        assert!(learner.converged());

        // Budget rule: steady large improvements never stall.
        let mut learner = WeightLearner::new(1, WeightLearnerConfig { max_evals: 4, ..config }).unwrap();
        for i in 0..4 {
            learner.observe(&w, 0.1 * i as f64).unwrap();
            assert_eq!(learner.converged(), i == 3);
        }
    }

    #[test]
    fn incumbent_tracks_best_observation() {
        let mut learner = WeightLearner::new(1, WeightLearnerConfig::default()).unwrap();
        let a = MetricWeights::uniform(1);
        let mut b = MetricWeights::uniform(1);
        b.layer = vec![0.8, 0.2];
        learner.observe(&a, 0.4).unwrap();
        learner.observe(&b, 0.6).unwrap();
        assert_eq!(learner.incumbent().layer, b.layer);
        assert_eq!(learner.best_performance(), Some(0.6));
        learner.observe(&a, 0.5).unwrap();
        assert_eq!(learner.incumbent().layer, b.layer);
    }

    /// Quadratic objective over the global-metric simplex, optimum at a
    /// grid-aligned target; a brute-force grid scan of that simplex
    /// provides the oracle optimum.
    #[test]
    fn bo_locates_quadratic_optimum() {
        let target = [0.2, 0.3, 0.5];
        let objective = |w: &MetricWeights| -> f64 {
            let d2: f64 = w
                .global_metric
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            1.0 - d2
        };

        // Brute-force oracle: 0.05-step grid over the 3-simplex.
        let mut oracle_best = f64::NEG_INFINITY;
        let mut oracle_arg = [0.0; 3];
        for i in 0..=20 {
            for j in 0..=(20 - i) {
                let gm = [
                    i as f64 / 20.0,
                    j as f64 / 20.0,
                    (20 - i - j) as f64 / 20.0,
                ];
                let w = MetricWeights {
                    global_metric: gm,
                    ..MetricWeights::uniform(1)
                };
                let v = objective(&w);
                if v > oracle_best {
                    oracle_best = v;
                    oracle_arg = gm;
                }
            }
        }
        // The target is grid-aligned, so the oracle must find it exactly.
        assert_abs_diff_eq!(oracle_best, 1.0, epsilon = 1e-12);
        assert_eq!(oracle_arg, target);

        let mut successes = 0;
        let seeds = 10;
        for seed in 0..seeds {
            let mut r = rng(seed);
            let config = WeightLearnerConfig {
                max_evals: 31,
                patience: 31, // disable early stopping for this probe
                ..Default::default()
            };
            let mut learner = WeightLearner::new(1, config).unwrap();
            let start = MetricWeights::uniform(1);
            learner.observe(&start, objective(&start)).unwrap();
            for _ in 0..30 {
                let proposal = learner.propose(&mut r).unwrap();
                let value = objective(&proposal.weights);
                learner.observe(&proposal.weights, value).unwrap();
            }
            let l1: f64 = learner
                .incumbent()
                .global_metric
                .iter()
                .zip(&oracle_arg)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if l1 <= 0.05 {
                successes += 1;
            }
        }
        assert!(
            successes * 10 >= seeds * 9,
            "only {successes}/{seeds} seeds within 0.05 L1 of the optimum"
        );
    }

    // ---- probe evaluation ----

    fn separable_samples(n: usize, num_classes: usize, seed: u64) -> Vec<Sample> {
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let class = i % num_classes;
                let mut features = vec![0.0; 4];
                features[class % 4] = 3.0;
                for f in features.iter_mut() {
                    *f += 0.3 * r.random::<f64>();
                }
                Sample::new(i as u64, features, class, class, 0)
            })
            .collect()
    }

    #[test]
    fn probe_overfits_memorizable_subset() {
        let samples = separable_samples(10, 2, 1);
        let refs: Vec<&Sample> = samples.iter().collect();
        let probe = ProbeConfig {
            epochs: 200,
            ..Default::default()
        };
        let acc = evaluate_performance(
            &refs,
            &samples,
            2,
            4,
            &[8],
            Activation::Relu,
            &probe,
            3,
        )
        .unwrap();
        assert!(acc >= 0.9, "memorization accuracy {acc}");
    }

    #[test]
    fn untrained_probe_sits_at_chance() {
        let train = separable_samples(8, 4, 2);
        let refs: Vec<&Sample> = train.iter().collect();
        // Random validation features: the untrained net has no class
        // preference on average.
        let mut r = rng(9);
        let validation: Vec<Sample> = (0..500)
            .map(|i| {
                let features: Vec<f64> = (0..4).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
                Sample::new(i as u64, features, (i % 4) as usize, (i % 4) as usize, 0)
            })
            .collect();
        let probe = ProbeConfig {
            epochs: 0,
            ..Default::default()
        };
        let acc = evaluate_performance(
            &refs,
            &validation,
            4,
            4,
            &[16],
            Activation::Relu,
            &probe,
            11,
        )
        .unwrap();
        assert!((acc - 0.25).abs() < 0.12, "chance-level accuracy {acc}");
    }

    #[test]
    fn probe_is_deterministic() {
        let samples = separable_samples(40, 3, 5);
        let refs: Vec<&Sample> = samples.iter().collect();
        let probe = ProbeConfig::default();
        let run = || {
            evaluate_performance(
                &refs,
                &samples,
                3,
                4,
                &[8],
                Activation::Tanh,
                &probe,
                17,
            )
            .unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn probe_rejects_empty_inputs() {
        let samples = separable_samples(4, 2, 6);
        let refs: Vec<&Sample> = samples.iter().collect();
        let probe = ProbeConfig::default();
        let empty: Vec<&Sample> = Vec::new();
        assert_eq!(
            evaluate_performance(&empty, &samples, 2, 4, &[4], Activation::Relu, &probe, 0)
                .unwrap_err()
                .class(),
            "config"
        );
        assert_eq!(
            evaluate_performance(&refs, &[], 2, 4, &[4], Activation::Relu, &probe, 0)
                .unwrap_err()
                .class(),
            "config"
        );
    }
}
