//! The six per-sample value signals and their composition into a single
//! data-value score.
//!
//! Layer signals (computed for every network layer l = 1..=L):
//! - quality: how typical the activation norm is against a running median;
//! - relevance: cosine between the sample's hidden-state gradient and the
//!   layer's gradient momentum;
//! - diversity: negative log kernel density of the activation against
//!   recently indexed activations (novelty).
//!
//! Global signals:
//! - gradient impact: signed projection of the parameter gradient onto the
//!   momentum direction (norm times cosine);
//! - conditional uncertainty: prediction entropy plus weighted entropies of
//!   the activation profiles;
//! - training stability: one minus the sample's normalized loss variance
//!   over recent model versions.
//!
//! Raw signals live on incompatible scales (diversity is a log density,
//! relevance is signed, uncertainty unbounded), so each is squashed to
//! (0, 1) by a running z-score followed by a sigmoid before entering the
//! convex composition: LVC_l = a*q + b*r + c*d per layer, GVC from the
//! global three, DVC = sum_l lambda_l * LVC_l + mu * GVC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::LshIndex;
use crate::mlp::{shannon_entropy, ForwardTrace, LayerGradients, OutputKind, PROB_FLOOR};
use crate::stats::{GradientMomentum, LayerStats, LossHistory, RunningMoments};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cosine similarity, with zero-norm vectors treated as similar to nothing.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Weights of the composition: `layer` holds lambda_1..lambda_L followed by
/// mu (one simplex), `layer_metric` holds the quality/relevance/diversity
/// mix shared by all layers, `global_metric` the impact/uncertainty/
/// stability mix (each its own simplex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub layer: Vec<f64>,
    pub layer_metric: [f64; 3],
    pub global_metric: [f64; 3],
}

impl MetricWeights {
    /// Uniform weights for a model with `num_layers` weight layers.
    pub fn uniform(num_layers: usize) -> Self {
        MetricWeights {
            layer: vec![1.0 / (num_layers + 1) as f64; num_layers + 1],
            layer_metric: [1.0 / 3.0; 3],
            global_metric: [1.0 / 3.0; 3],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer.len() - 1
    }

    /// lambda_l for a 1-based layer index.
    pub fn lambda(&self, l: usize) -> f64 {
        self.layer[l - 1]
    }

    pub fn mu(&self) -> f64 {
        self.layer[self.layer.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer.len() < 2 {
            return Err(Error::Config("layer weights need at least two entries".into()));
        }
        for (name, group) in [
            ("layer", &self.layer[..]),
            ("layer_metric", &self.layer_metric[..]),
            ("global_metric", &self.global_metric[..]),
        ] {
            if group.iter().any(|&w| !w.is_finite() || w < -1e-12) {
                return Err(Error::Config(format!("{name} weights must be non-negative")));
            }
            let sum: f64 = group.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} weights sum to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    /// Flattened [layer..., layer_metric..., global_metric...] used by the
    /// weight learner's surrogate.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.layer.clone();
        v.extend_from_slice(&self.layer_metric);
        v.extend_from_slice(&self.global_metric);
        v
    }

    pub fn from_flat(num_layers: usize, flat: &[f64]) -> Result<Self> {
        let expected = num_layers + 1 + 6;
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat weight vector has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let layer = flat[..num_layers + 1].to_vec();
        let lm = &flat[num_layers + 1..num_layers + 4];
        let gm = &flat[num_layers + 4..];
        Ok(MetricWeights {
            layer,
            layer_metric: [lm[0], lm[1], lm[2]],
            global_metric: [gm[0], gm[1], gm[2]],
        })
    }
}

/// Which of the six signals participate. Disabling a signal zeroes its
/// weight coordinate and renormalizes the group, so the signal has no
/// influence while the composition stays convex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationMask {
    pub quality: bool,
    pub relevance: bool,
    pub diversity: bool,
    pub gradient_impact: bool,
    pub uncertainty: bool,
    pub stability: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask {
            quality: true,
            relevance: true,
            diversity: true,
            gradient_impact: true,
            uncertainty: true,
            stability: true,
        }
    }
}

impl AblationMask {
    pub fn all_enabled(&self) -> bool {
        self == &AblationMask::default()
    }

    /// Applies the mask to a weight configuration. If a whole group is
    /// disabled its simplex mass moves to the other side of the layer/global
    /// split; disabling all six signals is rejected.
    pub fn apply(&self, weights: &MetricWeights) -> Result<MetricWeights> {
        let mut w = weights.clone();
        let flags_layer = [self.quality, self.relevance, self.diversity];
        let flags_global = [self.gradient_impact, self.uncertainty, self.stability];
        for (wi, &on) in w.layer_metric.iter_mut().zip(&flags_layer) {
            if !on {
                *wi = 0.0;
            }
        }
        for (wi, &on) in w.global_metric.iter_mut().zip(&flags_global) {
            if !on {
                *wi = 0.0;
            }
        }
        let layer_sum: f64 = w.layer_metric.iter().sum();
        let global_sum: f64 = w.global_metric.iter().sum();
        if layer_sum <= 0.0 && global_sum <= 0.0 {
            return Err(Error::Config("ablation disables every signal".into()));
        }
        let last = w.layer.len() - 1;
        if layer_sum > 0.0 {
            for wi in &mut w.layer_metric {
                *wi /= layer_sum;
            }
        } else {
            // No layer signals left: all layer mass goes to mu.
            for wi in &mut w.layer[..last] {
                *wi = 0.0;
            }
            w.layer[last] = 1.0;
            w.layer_metric = [1.0 / 3.0; 3]; // inert but simplex-valid
        }
        if global_sum > 0.0 {
            for wi in &mut w.global_metric {
                *wi /= global_sum;
            }
        } else {
            // No global signals left: mu's mass returns to the layers.
            let mu = w.layer[last];
            if mu > 0.0 {
                let rest: f64 = w.layer[..last].iter().sum();
                if rest > 0.0 {
                    for wi in &mut w.layer[..last] {
                        *wi *= 1.0 / rest;
                    }
                } else {
                    let n = last as f64;
                    for wi in &mut w.layer[..last] {
                        *wi = 1.0 / n;
                    }
                }
                w.layer[last] = 0.0;
            }
            w.global_metric = [1.0 / 3.0; 3];
        }
        w.validate()?;
        Ok(w)
    }
}

/// Raw (pre-normalization) signals for one candidate. Per-layer vectors are
/// indexed 0..L-1 for network layers 1..=L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub quality: Vec<f64>,
    pub relevance: Vec<f64>,
    pub diversity: Vec<f64>,
    pub gradient_impact: f64,
    pub uncertainty: f64,
    pub stability: f64,
    /// True when the stability signal fell back to its cold-start default.
    pub stability_cold: bool,
}

/// Signals after z-score + sigmoid squashing, same layout as [`RawMetrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMetrics {
    pub quality: Vec<f64>,
    pub relevance: Vec<f64>,
    pub diversity: Vec<f64>,
    pub gradient_impact: f64,
    pub uncertainty: f64,
    pub stability: f64,
}

/// Full valuation of one candidate: raw signals, normalized signals, and
/// the composed layer/global/total scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub raw: RawMetrics,
    pub norm: NormalizedMetrics,
    pub lvc: Vec<f64>,
    pub gvc: f64,
    pub dvc: f64,
}

/// Running z-score + sigmoid squash for one scalar signal. Until the score
/// distribution is observable (two finite observations with spread) the
/// neutral value 0.5 is reported.
#[derive(Debug, Clone, Default)]
pub struct ZScoreSquash {
    moments: RunningMoments,
}

impl ZScoreSquash {
    pub fn observe(&mut self, x: f64) {
        if x.is_finite() {
            self.moments.push(x);
        }
    }

    pub fn squash(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return 0.5;
        }
        let std = self.moments.std_dev();
        if self.moments.count() < 2 || std == 0.0 {
            return 0.5;
        }
        sigmoid((x - self.moments.mean()) / std)
    }

    pub fn count(&self) -> u64 {
        self.moments.count()
    }
}

/// One squash per (signal, layer) plus one per global signal, so layers
/// with naturally different activation scales normalize independently.
#[derive(Debug, Clone)]
pub struct MetricNormalizers {
    per_layer: Vec<[ZScoreSquash; 3]>,
    global: [ZScoreSquash; 3],
}

impl MetricNormalizers {
    pub fn new(num_layers: usize) -> Self {
        MetricNormalizers {
            per_layer: (0..num_layers).map(|_| Default::default()).collect(),
            global: Default::default(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn observe(&mut self, raw: &RawMetrics) -> Result<()> {
        if raw.quality.len() != self.per_layer.len() {
            return Err(Error::Shape(format!(
                "raw metrics cover {} layers, normalizers {}",
                raw.quality.len(),
                self.per_layer.len()
            )));
        }
        for (l, squashes) in self.per_layer.iter_mut().enumerate() {
            squashes[0].observe(raw.quality[l]);
            squashes[1].observe(raw.relevance[l]);
            squashes[2].observe(raw.diversity[l]);
        }
        self.global[0].observe(raw.gradient_impact);
        self.global[1].observe(raw.uncertainty);
        self.global[2].observe(raw.stability);
        Ok(())
    }

    pub fn normalize(&self, raw: &RawMetrics) -> NormalizedMetrics {
        let mut norm = NormalizedMetrics {
            quality: Vec::with_capacity(raw.quality.len()),
            relevance: Vec::with_capacity(raw.relevance.len()),
            diversity: Vec::with_capacity(raw.diversity.len()),
            gradient_impact: self.global[0].squash(raw.gradient_impact),
            uncertainty: self.global[1].squash(raw.uncertainty),
            stability: self.global[2].squash(raw.stability),
        };
        for (l, squashes) in self.per_layer.iter().enumerate() {
            norm.quality.push(squashes[0].squash(raw.quality[l]));
            norm.relevance.push(squashes[1].squash(raw.relevance[l]));
            norm.diversity.push(squashes[2].squash(raw.diversity[l]));
        }
        norm
    }
}

/// Quality signal from an activation norm and the layer's reference
/// median: sigmoid(norm/median - 1). The symmetric variant peaks at the
/// median and decays for deviations in either direction. Cold start (no
/// median yet) and a degenerate zero median report the neutral 0.5.
pub fn quality_from_norm(norm: f64, median: Option<f64>, symmetric: bool) -> f64 {
    match median {
        Some(m) if m > 0.0 => {
            let ratio = norm / m;
            if symmetric {
                sigmoid(-(ratio - 1.0).abs())
            } else {
                sigmoid(ratio - 1.0)
            }
        }
        _ => 0.5,
    }
}

/// Quality of network layer `l` (1-based) for a trace.
pub fn quality(trace: &ForwardTrace, stats: &LayerStats, l: usize, symmetric: bool) -> f64 {
    let h = &trace.activations[l];
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    quality_from_norm(norm, stats.median_norm().ok(), symmetric)
}

/// Relevance of network layer `l` (1-based): cosine between the sample's
/// gradient at h_l and the layer's momentum. The output layer's hidden
/// gradient is not tracked, and cold momentum or zero-norm vectors are
/// neutral; all of those return 0.
pub fn relevance(grads: &LayerGradients, momentum: &GradientMomentum, l: usize) -> f64 {
    if l >= grads.hidden_grads.len() {
        return 0.0;
    }
    match momentum.layer(l) {
        Some(m) => cosine_similarity(&grads.hidden_grads[l], m),
        None => 0.0,
    }
}

/// Diversity of network layer `l` (1-based): negative log of the truncated
/// kernel density of h_l against the layer's index.
pub fn diversity(
    trace: &ForwardTrace,
    index: &LshIndex,
    l: usize,
    sigma: f64,
    top_k: usize,
    total_seen: usize,
) -> Result<f64> {
    let density = index.kernel_density(&trace.activations[l], sigma, top_k, total_seen.max(1))?;
    Ok(-density.ln())
}

/// Signed projection of the parameter gradient onto the momentum
/// direction: ||g|| cos(g, m) = dot(g, m) / ||m||. Cold momentum or a
/// zero-length momentum direction is neutral 0.
pub fn gradient_impact(grads: &LayerGradients, momentum: &GradientMomentum) -> f64 {
    let Some(m) = momentum.flat() else {
        return 0.0;
    };
    let mnorm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if mnorm == 0.0 {
        return 0.0;
    }
    let dot: f64 = grads.param_grad_flat.iter().zip(m).map(|(a, b)| a * b).sum();
    dot / mnorm
}

/// Prediction entropy (classifiers only) plus lambda-weighted entropies of
/// the L1-normalized absolute activation profile of every layer. Scale
/// invariant in the activations; all-zero profiles count as uniform.
pub fn conditional_uncertainty(
    output: OutputKind,
    trace: &ForwardTrace,
    weights: &MetricWeights,
) -> f64 {
    let mut h = if output == OutputKind::Softmax {
        shannon_entropy(&trace.output_probs)
    } else {
        0.0
    };
    for l in 1..trace.activations.len() {
        h += weights.lambda(l) * activation_entropy(&trace.activations[l]);
    }
    h
}

/// Entropy of the L1-normalized absolute activation vector.
pub fn activation_entropy(h: &[f64]) -> f64 {
    let sum: f64 = h.iter().map(|v| v.abs()).sum();
    if sum <= PROB_FLOOR {
        return (h.len() as f64).ln();
    }
    -h.iter()
        .map(|v| {
            let p = (v.abs() / sum).clamp(PROB_FLOOR, 1.0);
            p * p.ln()
        })
        .sum::<f64>()
}

/// Stability of a sample's recent losses: 1 - Var/(max_var + eps), clamped
/// to [0, 1]. Returns `(value, cold)` where cold marks the 1.0 default used
/// before two loss observations exist.
pub fn training_stability(history: &LossHistory, digest: u64) -> (f64, bool) {
    match history.variance(digest) {
        Some(var) => {
            let ts = 1.0 - var / (history.max_variance() + 1e-12);
            (ts.clamp(0.0, 1.0), false)
        }
        None => (1.0, true),
    }
}

/// Composed scores from normalized signals.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedScore {
    pub lvc: Vec<f64>,
    pub gvc: f64,
    pub dvc: f64,
}

/// Convex combination of an LVC profile and a GVC value under the layer
/// weights: DVC = sum_l lambda_l LVC_l + mu GVC.
pub fn aggregate_dvc(lvc: &[f64], gvc: f64, weights: &MetricWeights) -> Result<f64> {
    weights.validate()?;
    if lvc.len() != weights.num_layers() {
        return Err(Error::Shape(format!(
            "{} layer scores for {} layer weights",
            lvc.len(),
            weights.num_layers()
        )));
    }
    let mut dvc = weights.mu() * gvc;
    for (l, v) in lvc.iter().enumerate() {
        dvc += weights.layer[l] * v;
    }
    Ok(dvc)
}

/// Full composition from normalized signals to LVC/GVC/DVC.
pub fn compose_dvc(norm: &NormalizedMetrics, weights: &MetricWeights) -> Result<ComposedScore> {
    weights.validate()?;
    let [a, b, c] = weights.layer_metric;
    let lvc: Vec<f64> = (0..norm.quality.len())
        .map(|l| a * norm.quality[l] + b * norm.relevance[l] + c * norm.diversity[l])
        .collect();
    let [xi, zeta, eta] = weights.global_metric;
    let gvc = xi * norm.gradient_impact + zeta * norm.uncertainty + eta * norm.stability;
    let dvc = aggregate_dvc(&lvc, gvc, weights)?;
    Ok(ComposedScore { lvc, gvc, dvc })
}
