//! Minibatch SGD loops and classifier evaluation shared by the probe
//! evaluator, the per-round model updates, the baselines, and the
//! experiment harness.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mlp::{LossKind, MlpModel, Target};

/// Epoch/step-size parameters for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Trains with shuffled minibatch SGD on cross-entropy. Every epoch
/// reshuffles with the supplied RNG; gradients are averaged within each
/// batch. Returns the mean training loss of the final epoch (0.0 when
/// `epochs` is 0).
pub fn train_classifier(
    model: &mut MlpModel,
    samples: &[&Sample],
    config: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let loss = LossKind::CrossEntropy;
    let targets: Vec<Target> = samples.iter().map(|s| s.target()).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_epoch_loss = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], &Target)> = chunk
                .iter()
                .map(|&i| (samples[i].features.as_slice(), &targets[i]))
                .collect();
            for &i in chunk {
                epoch_loss += model
                    .forward(&samples[i].features, &targets[i], &loss)?
                    .loss;
            }
            model.sgd_step(&batch, config.learning_rate, &loss)?;
        }
        last_epoch_loss = epoch_loss / samples.len() as f64;
    }
    Ok(last_epoch_loss)
}

/// Most-probable class, ties broken toward the lowest index.
pub fn predict_class(model: &MlpModel, features: &[f64]) -> Result<usize> {
    let probs = model.predict_proba(features)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of samples whose predicted class equals the observed label.
pub fn accuracy(model: &MlpModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if predict_class(model, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Macro-averaged F1 over `num_classes` from parallel truth/prediction
/// slices. Classes with no true or predicted members contribute F1 = 0.
pub fn macro_f1_score(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() || num_classes == 0 {
        return Err(Error::Config("macro-F1 needs samples and classes".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnc = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Data(format!("class {} out of range", t.max(p))));
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnc[t] += 1;
        }
    }
    let mut sum = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fnc[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(sum / num_classes as f64)
}

/// Macro-F1 of a model's predictions against observed labels.
pub fn macro_f1(model: &MlpModel, samples: &[Sample], num_classes: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let pred = samples
        .iter()
        .map(|s| predict_class(model, &s.features))
        .collect::<Result<Vec<usize>>>()?;
    macro_f1_score(&truth, &pred, num_classes)
}
