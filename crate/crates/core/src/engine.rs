//! The budget-constrained selection engine: a uniform cold start primes
//! the model and statistics, then bandit-guided rounds draw candidates
//! per source, value them through the cache, pick a diversified batch,
//! warm-update the model, and periodically re-tune the composition
//! weights. The run produces a serializable report with a
//! timing-independent canonical form.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::BanditState;
use crate::cache::{CacheStats, GradCache};
use crate::data::{Sample, SourcePool};
use crate::error::{Error, Result};
use crate::lsh::{LshIndex, LshStats};
use crate::metrics::{
    compose_dvc, conditional_uncertainty, cosine_similarity, diversity, gradient_impact, quality,
    relevance, training_stability, AblationMask, MetricNormalizers, MetricWeights, RawMetrics,
};
use crate::mlp::{Activation, LossKind, MlpModel, OutputKind, SampleEval};
use crate::stats::{LossHistory, OnlineStats, LOSS_WINDOW, MOMENTUM_BETA, NORM_WINDOW};
use crate::train::{train_classifier, TrainConfig};
use crate::weights::{evaluate_performance, ProbeConfig, WeightLearner, WeightLearnerConfig};

/// Training budget: an absolute sample count or a fraction of the pool.
/// In JSON an integer is a count and a float a fraction, so `1` selects
/// one sample while `1.0` selects the whole pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetSpec {
    Count(u64),
    Fraction(f64),
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec::Fraction(0.2)
    }
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BudgetSpec::Count(0) => Err(Error::Config("budget count must be positive".into())),
            BudgetSpec::Count(_) => Ok(()),
            BudgetSpec::Fraction(f) => {
                if f.is_finite() && *f > 0.0 && *f <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "budget fraction {f} must lie in (0, 1]"
                    )))
                }
            }
        }
    }

    /// Absolute budget for a pool of `pool_size` training samples
    /// (fractions round to the nearest count, at least 1).
    pub fn resolve(&self, pool_size: usize) -> Result<usize> {
        self.validate()?;
        Ok(match self {
            BudgetSpec::Count(c) => *c as usize,
            BudgetSpec::Fraction(f) => ((f * pool_size as f64).round() as usize).max(1),
        })
    }
}

/// Architecture of the working classifier; input and output widths come
/// from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_layers: vec![32, 16],
            activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Full width list for the given data shape.
    pub fn dims(&self, feature_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(feature_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(num_classes);
        dims
    }
}

/// Everything that parameterizes a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub budget: BudgetSpec,
    /// Samples selected per round (b).
    pub round_batch: usize,
    /// Weight learning happens on rounds divisible by this interval (F).
    pub weight_update_interval: usize,
    /// Cosine-similarity ceiling between accepted batch members.
    pub diversity_threshold: f64,
    /// Per-source cap within one round's batch; default is ceil(b / 2).
    pub source_quota: Option<usize>,
    pub learning_rate: f64,
    /// Epochs per warm model update on a freshly selected batch.
    pub update_epochs: usize,
    pub update_batch_size: usize,
    pub cache_capacity: usize,
    pub lsh_bits: usize,
    pub lsh_tables: usize,
    /// Neighbors contributing to the kernel-density diversity signal.
    pub lsh_top_k: usize,
    /// Fixed kernel bandwidth; None derives one per layer from activation
    /// spread.
    pub kernel_bandwidth: Option<f64>,
    pub history_window: usize,
    pub norm_window: usize,
    pub momentum_beta: f64,
    /// Symmetric (peak-at-median) variant of the quality signal.
    pub quality_symmetric: bool,
    pub model: ModelSpec,
    pub probe: ProbeConfig,
    pub learner: WeightLearnerConfig,
    pub ablation: AblationMask,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            budget: BudgetSpec::default(),
            round_batch: 16,
            weight_update_interval: 5,
            diversity_threshold: 0.95,
            source_quota: None,
            learning_rate: 0.05,
            update_epochs: 1,
            update_batch_size: 32,
            cache_capacity: 4096,
            lsh_bits: 12,
            lsh_tables: 16,
            lsh_top_k: 32,
            kernel_bandwidth: None,
            history_window: LOSS_WINDOW,
            norm_window: NORM_WINDOW,
            momentum_beta: MOMENTUM_BETA,
            quality_symmetric: false,
            model: ModelSpec::default(),
            probe: ProbeConfig::default(),
            learner: WeightLearnerConfig::default(),
            ablation: AblationMask::default(),
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.round_batch == 0 {
            return Err(Error::Config("round batch must be positive".into()));
        }
        if self.weight_update_interval == 0 {
            return Err(Error::Config(
                "weight update interval must be at least 1".into(),
            ));
        }
        if !(self.diversity_threshold > 0.0 && self.diversity_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "diversity threshold {} must lie in (0, 1]",
                self.diversity_threshold
            )));
        }
        if self.source_quota == Some(0) {
            return Err(Error::Config("source quota must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.update_epochs == 0 || self.update_batch_size == 0 {
            return Err(Error::Config(
                "update epochs and batch size must be positive".into(),
            ));
        }
        if self.cache_capacity == 0 {
            return Err(Error::Config("cache capacity must be positive".into()));
        }
        if self.lsh_bits == 0 || self.lsh_bits > 64 {
            return Err(Error::Config(format!(
                "lsh bits {} not in 1..=64",
                self.lsh_bits
            )));
        }
        if self.lsh_tables == 0 || self.lsh_top_k == 0 {
            return Err(Error::Config(
                "lsh tables and top_k must be positive".into(),
            ));
        }
        if let Some(bw) = self.kernel_bandwidth {
            if !bw.is_finite() || bw <= 0.0 {
                return Err(Error::Config(format!(
                    "kernel bandwidth {bw} must be positive"
                )));
            }
        }
        if self.norm_window < 2 {
            return Err(Error::Config("norm window must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::Config(format!(
                "momentum beta {} must lie in [0, 1)",
                self.momentum_beta
            )));
        }
        self.model.validate()?;
        self.probe.validate()?;
        self.learner.validate()?;
        Ok(())
    }

    fn quota(&self) -> usize {
        self.source_quota.unwrap_or(self.round_batch.div_ceil(2))
    }
}

/// Greedy diversified pick over rank-ordered candidates.
///
/// Walks candidates in order and accepts one when its cosine similarity
/// to every already-accepted member stays at or below the threshold and
/// its source has quota left. If a full scan accepts fewer than `batch`,
/// the threshold relaxes by 0.02 (capped at 1.0) and the scan repeats
/// over the remaining candidates. Returns accepted indices in acceptance
/// order plus the threshold that was finally in force.
pub fn diversified_selection(
    features: &[&[f64]],
    sources: &[usize],
    batch: usize,
    theta: f64,
    quota: usize,
) -> Result<(Vec<usize>, f64)> {
    if features.len() != sources.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} source tags",
            features.len(),
            sources.len()
        )));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Config(format!(
            "diversity threshold {theta} must lie in (0, 1]"
        )));
    }
    if quota == 0 {
        return Err(Error::Config("source quota must be positive".into()));
    }
    let n = features.len();
    let mut picked: Vec<usize> = Vec::new();
    let mut taken = vec![false; n];
    let max_source = sources.iter().copied().max().map_or(0, |s| s + 1);
    let mut per_source = vec![0usize; max_source];
    let mut th = theta;
    loop {
        for i in 0..n {
            if picked.len() >= batch {
                break;
            }
            if taken[i] || per_source[sources[i]] >= quota {
                continue;
            }
            let diverse = picked
                .iter()
                .all(|&j| cosine_similarity(features[i], features[j]) <= th);
            if diverse {
                taken[i] = true;
                per_source[sources[i]] += 1;
                picked.push(i);
            }
        }
        if picked.len() >= batch || th >= 1.0 {
            break;
        }
        th = (th + 0.02).min(1.0);
    }
    Ok((picked, th))
}

/// One selected sample in the final report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRecord {
    pub id: u64,
    pub digest: u64,
    pub source: usize,
    /// Composed value at selection time; cold-start picks carry their
    /// post-priming value.
    pub dvc: f64,
    /// 0 marks the cold start.
    pub round: usize,
}

/// Per-round accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub sources: Vec<usize>,
    pub candidates: usize,
    pub accepted: usize,
    pub theta: f64,
    pub mean_dvc: f64,
    pub probe_accuracy: Option<f64>,
}

/// One weight-learning step: the weights in force after round `round`
/// and the probe accuracy that drove the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round: usize,
    pub probe_accuracy: f64,
    pub weights: MetricWeights,
}

/// Full outcome of a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub budget: usize,
    pub pool_size: usize,
    pub num_sources: usize,
    pub selected: Vec<SelectedRecord>,
    pub per_source_counts: Vec<usize>,
    pub cold_start_per_source: usize,
    pub cold_start_selected: usize,
    /// Samples the cold start wanted but sources could not provide.
    pub cold_start_shortfall: usize,
    pub rounds: Vec<RoundSummary>,
    pub weight_trajectory: Vec<TrajectoryPoint>,
    pub final_weights: MetricWeights,
    pub bandit: BanditState,
    pub cache: CacheStats,
    pub lsh: Vec<LshStats>,
    /// Wall-clock duration; excluded from the canonical form.
    pub elapsed_ms: f64,
}

impl SelectionReport {
    pub fn selected_ids(&self) -> Vec<u64> {
        self.selected.iter().map(|s| s.id).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timing field zeroed: two runs with the same config,
    /// pool, and seed produce byte-identical output.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.elapsed_ms = 0.0;
        canonical.to_json()
    }
}

/// Live state of one selection run.
struct EngineState<'a> {
    pool: &'a SourcePool,
    config: &'a SelectionConfig,
    budget: usize,
    quota: usize,
    num_layers: usize,
    loss: LossKind,
    model: MlpModel,
    cache: GradCache,
    stats: OnlineStats,
    history: LossHistory,
    normalizers: MetricNormalizers,
    indexes: Vec<LshIndex>,
    bandit: BanditState,
    learner: WeightLearner,
    weights: MetricWeights,
    masked: MetricWeights,
    rng: ChaCha8Rng,
    /// Per source: indices still drawable.
    avail: Vec<Vec<usize>>,
    selected: Vec<SelectedRecord>,
    chosen_samples: Vec<Sample>,
    selected_ids: HashSet<u64>,
    selected_digests: HashSet<u64>,
    per_source_counts: Vec<usize>,
    cold_shortfall: usize,
    audit: Option<std::fs::File>,
}

struct ValuedCandidate {
    source: usize,
    index: usize,
    raw: RawMetrics,
    dvc: f64,
}

impl<'a> EngineState<'a> {
    fn new(
        pool: &'a SourcePool,
        config: &'a SelectionConfig,
        audit_path: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        pool.validate()?;
        let pool_size = pool.train_len();
        if pool_size == 0 {
            return Err(Error::Config("training pool is empty".into()));
        }
        let budget = config.budget.resolve(pool_size)?;
        if config.round_batch > budget {
            return Err(Error::Config(format!(
                "round batch {} exceeds budget {budget}",
                config.round_batch
            )));
        }
        // Reject an all-disabling ablation before any state exists.
        config.ablation.apply(&MetricWeights::uniform(1))?;
        let dims = config.model.dims(pool.feature_dim, pool.num_classes);
        let num_layers = dims.len() - 1;
        let model = MlpModel::new(&dims, config.model.activation, OutputKind::Softmax, config.seed)?;
        let indexes = (1..dims.len())
            .map(|l| {
                LshIndex::new(
                    dims[l],
                    config.lsh_bits,
                    config.lsh_tables,
                    config.seed ^ (l as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = MetricWeights::uniform(num_layers);
        let masked = config.ablation.apply(&weights)?;
        let audit = match audit_path {
            Some(p) => Some(std::fs::File::create(p).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", p.display()),
                ))
            })?),
            None => None,
        };
        Ok(EngineState {
            pool,
            config,
            budget,
            quota: config.quota(),
            num_layers,
            loss: LossKind::CrossEntropy,
            model,
            cache: GradCache::new(config.cache_capacity)?,
            stats: OnlineStats::new(&dims, config.norm_window, config.momentum_beta),
            history: LossHistory::new(config.history_window),
            normalizers: MetricNormalizers::new(num_layers),
            indexes,
            bandit: BanditState::new(pool.num_sources())?,
            learner: WeightLearner::new(num_layers, config.learner.clone())?,
            weights: weights.clone(),
            masked,
            rng: rand::SeedableRng::seed_from_u64(config.seed),
            avail: pool.sources.iter().map(|s| (0..s.len()).collect()).collect(),
            selected: Vec::new(),
            chosen_samples: Vec::new(),
            selected_ids: HashSet::new(),
            selected_digests: HashSet::new(),
            per_source_counts: vec![0; pool.num_sources()],
            cold_shortfall: 0,
            audit,
        })
    }

    fn audit_line(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(f) = self.audit.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&value)?)?;
        }
        Ok(())
    }

    fn sample(&self, source: usize, index: usize) -> &'a Sample {
        &self.pool.sources[source][index]
    }

    /// Draws up to `m` distinct candidate indices from a source by partial
    /// shuffle of its availability list.
    fn draw(&mut self, source: usize, m: usize) -> Vec<usize> {
        let avail = &mut self.avail[source];
        let m = m.min(avail.len());
        for i in 0..m {
            let j = self.rng.random_range(i..avail.len());
            avail.swap(i, j);
        }
        avail[..m].to_vec()
    }

    /// Evaluates one sample through the cache and records its loss for
    /// the stability history.
    fn evaluate(&mut self, sample: &Sample) -> Result<std::sync::Arc<SampleEval>> {
        let eval =
            self.cache
                .get_or_compute(&self.model, &sample.features, &sample.target(), &self.loss)?;
        self.history
            .record(sample.digest, eval.trace.model_version, eval.trace.loss);
        Ok(eval)
    }

    /// Raw six-signal profile of one evaluated sample under the current
    /// statistics.
    fn raw_metrics(&self, sample: &Sample, eval: &SampleEval) -> Result<RawMetrics> {
        let trace = &eval.trace;
        let grads = &eval.grads;
        let mut q = Vec::with_capacity(self.num_layers);
        let mut r = Vec::with_capacity(self.num_layers);
        let mut d = Vec::with_capacity(self.num_layers);
        for l in 1..=self.num_layers {
            q.push(quality(
                trace,
                self.stats.layer(l),
                l,
                self.config.quality_symmetric,
            ));
            r.push(relevance(grads, &self.stats.momentum, l));
            let sigma = self
                .config
                .kernel_bandwidth
                .unwrap_or_else(|| self.stats.layer(l).bandwidth());
            let index = &self.indexes[l - 1];
            d.push(diversity(
                trace,
                index,
                l,
                sigma,
                self.config.lsh_top_k,
                index.len().max(1),
            )?);
        }
        let (stability, stability_cold) = training_stability(&self.history, sample.digest);
        Ok(RawMetrics {
            quality: q,
            relevance: r,
            diversity: d,
            gradient_impact: gradient_impact(grads, &self.stats.momentum),
            uncertainty: conditional_uncertainty(OutputKind::Softmax, trace, &self.masked),
            stability,
            stability_cold,
        })
    }

    /// Registers an accepted sample everywhere: bookkeeping, bandit
    /// reward, and the report record.
    fn accept(&mut self, source: usize, index: usize, dvc: f64, round: usize) -> Result<()> {
        let sample = self.sample(source, index);
        self.selected_ids.insert(sample.id);
        self.selected_digests.insert(sample.digest);
        self.per_source_counts[source] += 1;
        self.bandit.update_reward(source, dvc)?;
        self.selected.push(SelectedRecord {
            id: sample.id,
            digest: sample.digest,
            source,
            dvc,
            round,
        });
        self.chosen_samples.push(sample.clone());
        Ok(())
    }

    /// Trains the working model on freshly accepted samples.
    fn warm_update(&mut self, new_from: usize) -> Result<()> {
        if new_from >= self.chosen_samples.len() {
            return Ok(());
        }
        let batch: Vec<&Sample> = self.chosen_samples[new_from..].iter().collect();
        let cfg = TrainConfig {
            epochs: self.config.update_epochs,
            learning_rate: self.config.learning_rate,
            batch_size: self.config.update_batch_size,
        };
        train_classifier(&mut self.model, &batch, &cfg, &mut self.rng)?;
        Ok(())
    }

    /// Evaluates freshly accepted samples under the updated model and
    /// feeds activations into the statistics and per-layer indexes.
    fn prime(&mut self, new_from: usize) -> Result<Vec<std::sync::Arc<SampleEval>>> {
        let samples: Vec<Sample> = self.chosen_samples[new_from..].to_vec();
        let mut evals = Vec::with_capacity(samples.len());
        for sample in &samples {
            let eval = self.evaluate(sample)?;
            self.stats.update(&eval.trace, &eval.grads)?;
            for l in 1..=self.num_layers {
                self.indexes[l - 1].insert(sample.id, &eval.trace.activations[l])?;
            }
            evals.push(eval);
        }
        Ok(evals)
    }

    /// Removes already-claimed ids and digests from the given sources'
    /// availability lists.
    fn purge(&mut self, sources: &[usize]) {
        for &s in sources {
            let pool_source = &self.pool.sources[s];
            let ids = &self.selected_ids;
            let digests = &self.selected_digests;
            self.avail[s].retain(|&i| {
                let sample = &pool_source[i];
                !ids.contains(&sample.id) && !digests.contains(&sample.digest)
            });
        }
    }

    fn cold_start(&mut self) -> Result<()> {
        let k = self.pool.num_sources();
        let per_source = self.budget.div_ceil(2 * k);
        let mut shortfall = 0;
        for s in 0..k {
            let remaining = self.budget - self.selected_ids.len();
            if remaining == 0 {
                break;
            }
            let want = per_source.min(remaining);
            // Shuffle the whole availability list and take the first
            // `want` distinct-digest samples it can provide.
            let order = self.draw(s, self.avail[s].len());
            let mut got = 0;
            for index in order {
                if got == want {
                    break;
                }
                let sample = self.sample(s, index);
                if self.selected_digests.contains(&sample.digest) {
                    continue;
                }
                got += 1;
                // Cold-start value is assigned after priming below.
                self.selected_ids.insert(sample.id);
                self.selected_digests.insert(sample.digest);
                self.per_source_counts[s] += 1;
                self.selected.push(SelectedRecord {
                    id: sample.id,
                    digest: sample.digest,
                    source: s,
                    dvc: 0.0,
                    round: 0,
                });
                self.chosen_samples.push(sample.clone());
            }
            shortfall += want - got;
        }
        let all: Vec<usize> = (0..k).collect();
        self.purge(&all);
        self.warm_update(0)?;
        let evals = self.prime(0)?;
        // Value the cold batch under the primed statistics; these scores
        // seed the normalizers and give the bandit its first rewards.
        let mut raws = Vec::with_capacity(evals.len());
        for (record_idx, eval) in evals.iter().enumerate() {
            let sample = self.chosen_samples[record_idx].clone();
            raws.push(self.raw_metrics(&sample, eval)?);
        }
        for raw in &raws {
            self.normalizers.observe(raw)?;
        }
        for (record_idx, raw) in raws.iter().enumerate() {
            let norm = self.normalizers.normalize(raw);
            let dvc = compose_dvc(&norm, &self.masked)?.dvc;
            self.selected[record_idx].dvc = dvc;
            let source = self.selected[record_idx].source;
            self.bandit.update_reward(source, dvc)?;
        }
        let cold = self.selected.len();
        self.audit_line(serde_json::json!({
            "event": "cold_start",
            "selected": cold,
            "per_source": self.per_source_counts,
            "shortfall": shortfall,
        }))?;
        self.cold_shortfall = shortfall;
        Ok(())
    }

    /// Weighted sampling of up to `m` distinct non-exhausted sources.
    fn choose_sources(&mut self, m: usize) -> Vec<usize> {
        let probs = self.bandit.source_probabilities();
        let mut eligible: Vec<usize> = (0..self.avail.len())
            .filter(|&s| !self.avail[s].is_empty())
            .collect();
        let mut chosen = Vec::new();
        while chosen.len() < m && !eligible.is_empty() {
            let total: f64 = eligible.iter().map(|&s| probs[s]).sum();
            let mut u = self.rng.random::<f64>() * total;
            let mut pick = eligible.len() - 1;
            for (i, &s) in eligible.iter().enumerate() {
                u -= probs[s];
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            chosen.push(eligible.remove(pick));
        }
        chosen
    }

    fn run_round(&mut self, round: usize) -> Result<RoundSummary> {
        let b = self.config.round_batch;
        let remaining = self.budget - self.selected.len();
        let batch_target = b.min(remaining);
        let sources = self.choose_sources(b.min(self.pool.num_sources()));
        // Draw up to 2b per chosen source, drop anything already claimed
        // (by id or digest) and in-round duplicate digests.
        let mut pending: Vec<(usize, usize)> = Vec::new();
        let mut seen = HashSet::new();
        for &s in &sources {
            for index in self.draw(s, 2 * b) {
                let sample = self.sample(s, index);
                if self.selected_ids.contains(&sample.id)
                    || self.selected_digests.contains(&sample.digest)
                    || !seen.insert(sample.digest)
                {
                    continue;
                }
                pending.push((s, index));
            }
        }
        // Two-pass valuation: raw signals for everyone, then the batch
        // updates the normalizers, then scores are composed.
        let mut valued: Vec<ValuedCandidate> = Vec::with_capacity(pending.len());
        for (s, index) in pending {
            let sample = self.sample(s, index);
            let eval = self.evaluate(sample)?;
            let raw = self.raw_metrics(sample, &eval)?;
            valued.push(ValuedCandidate {
                source: s,
                index,
                raw,
                dvc: 0.0,
            });
        }
        for cand in &valued {
            self.normalizers.observe(&cand.raw)?;
        }
        for cand in &mut valued {
            let norm = self.normalizers.normalize(&cand.raw);
            cand.dvc = compose_dvc(&norm, &self.masked)?.dvc;
        }
        let candidates = valued.len();
        // Rank by value, best first; ties break on id for determinism.
        valued.sort_by(|a, b| {
            b.dvc
                .partial_cmp(&a.dvc)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    self.sample(a.source, a.index)
                        .id
                        .cmp(&self.sample(b.source, b.index).id)
                })
        });
        valued.truncate(3 * b);
        let features: Vec<&[f64]> = valued
            .iter()
            .map(|c| self.sample(c.source, c.index).features.as_slice())
            .collect();
        let cand_sources: Vec<usize> = valued.iter().map(|c| c.source).collect();
        let (picked, theta) = diversified_selection(
            &features,
            &cand_sources,
            batch_target,
            self.config.diversity_threshold,
            self.quota,
        )?;
        let new_from = self.chosen_samples.len();
        let mut dvc_sum = 0.0;
        for &i in &picked {
            let c = &valued[i];
            dvc_sum += c.dvc;
            self.accept(c.source, c.index, c.dvc, round)?;
        }
        drop(valued);
        self.purge(&sources);
        self.warm_update(new_from)?;
        self.prime(new_from)?;
        // Weight learning only on rounds divisible by the interval.
        let mut probe_accuracy = None;
        if round % self.config.weight_update_interval == 0
            && !self.pool.validation.is_empty()
            && !self.chosen_samples.is_empty()
            && !self.learner.converged()
        {
            let subset: Vec<&Sample> = self.chosen_samples.iter().collect();
            let acc = evaluate_performance(
                &subset,
                &self.pool.validation,
                self.pool.num_classes,
                self.pool.feature_dim,
                &self.config.model.hidden_layers,
                self.config.model.activation,
                &self.config.probe,
                self.config.seed ^ 0xf00d ^ round as u64,
            )?;
            self.learner.observe(&self.weights, acc)?;
            if !self.learner.converged() {
                let proposal = self.learner.propose(&mut self.rng)?;
                self.weights = proposal.weights;
                self.masked = self.config.ablation.apply(&self.weights)?;
            }
            probe_accuracy = Some(acc);
        }
        let accepted = picked.len();
        let summary = RoundSummary {
            round,
            sources: sources.clone(),
            candidates,
            accepted,
            theta,
            mean_dvc: if accepted == 0 {
                0.0
            } else {
                dvc_sum / accepted as f64
            },
            probe_accuracy,
        };
        self.audit_line(serde_json::json!({
            "event": "round",
            "round": round,
            "sources": summary.sources,
            "candidates": summary.candidates,
            "accepted": summary.accepted,
            "theta": summary.theta,
            "probe_accuracy": summary.probe_accuracy,
        }))?;
        Ok(summary)
    }
}

/// Runs the full selection loop on a pool and returns the report.
/// `audit_path`, when set, receives one JSON line for the cold start and
/// one per round.
pub fn run_selection(
    pool: &SourcePool,
    config: &SelectionConfig,
    audit_path: Option<&Path>,
) -> Result<SelectionReport> {
    let start = Instant::now();
    let mut state = EngineState::new(pool, config, audit_path)?;
    state.cold_start()?;
    let mut rounds = Vec::new();
    let mut trajectory = Vec::new();
    let mut round = 0;
    while state.selected.len() < state.budget {
        if state.avail.iter().all(|a| a.is_empty()) {
            break;
        }
        round += 1;
        let summary = state.run_round(round)?;
        if let Some(acc) = summary.probe_accuracy {
            trajectory.push(TrajectoryPoint {
                round,
                probe_accuracy: acc,
                weights: state.weights.clone(),
            });
        }
        rounds.push(summary);
    }
    let report = SelectionReport {
        budget: state.budget,
        pool_size: pool.train_len(),
        num_sources: pool.num_sources(),
        selected: state.selected.clone(),
        per_source_counts: state.per_source_counts.clone(),
        cold_start_per_source: state.budget.div_ceil(2 * pool.num_sources()),
        cold_start_selected: state.selected.iter().filter(|s| s.round == 0).count(),
        cold_start_shortfall: state.cold_shortfall,
        rounds,
        weight_trajectory: trajectory,
        final_weights: state.weights.clone(),
        bandit: state.bandit.clone(),
        cache: state.cache.stats(),
        lsh: state.indexes.iter().map(|i| i.stats()).collect(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1_000.0,
    };
    Ok(report)
}
