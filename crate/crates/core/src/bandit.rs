//! UCB1 bandit over data sources: per-arm pull statistics, optimism
//! scores with an untried-arm sentinel, a floor-regularized probability
//! view for sampling sources, and a Bernoulli regret simulator with the
//! classic logarithmic bound for reference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default exploration coefficient multiplying the confidence radius.
pub const DEFAULT_EXPLORATION: f64 = 1.0;

/// Total probability mass reserved as a floor across all arms; each arm
/// keeps at least `PROBABILITY_FLOOR_MASS / num_arms`.
pub const PROBABILITY_FLOOR_MASS: f64 = 0.01;

/// Pull count and accumulated reward for one source arm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UcbArm {
    pub pulls: u64,
    pub reward_sum: f64,
}

impl UcbArm {
    /// Empirical mean reward; 0 before the first pull.
    pub fn mean(&self) -> f64 {
        if self.pulls == 0 {
            0.0
        } else {
            self.reward_sum / self.pulls as f64
        }
    }
}

/// UCB1 state over a fixed set of source arms.
///
/// Rewards are clamped to [0, 1] on entry (counted in
/// [`clamp_warnings`](Self::clamp_warnings)), so empirical means always
/// stay in the unit interval and the standard regret analysis applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    arms: Vec<UcbArm>,
    exploration: f64,
    clamp_warnings: u64,
}

impl BanditState {
    pub fn new(num_sources: usize) -> Result<Self> {
        Self::with_exploration(num_sources, DEFAULT_EXPLORATION)
    }

    pub fn with_exploration(num_sources: usize, exploration: f64) -> Result<Self> {
        if num_sources == 0 {
            return Err(Error::Config("bandit needs at least one source".into()));
        }
        if !exploration.is_finite() || exploration < 0.0 {
            return Err(Error::Config(format!(
                "exploration coefficient must be finite and non-negative, got {exploration}"
            )));
        }
        Ok(BanditState {
            arms: vec![UcbArm::default(); num_sources],
            exploration,
            clamp_warnings: 0,
        })
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn arms(&self) -> &[UcbArm] {
        &self.arms
    }

    pub fn total_pulls(&self) -> u64 {
        self.arms.iter().map(|a| a.pulls).sum()
    }

    /// Number of rewards that fell outside [0, 1] and were clamped.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings
    }

    /// Optimism score of one arm: empirical mean plus the confidence
    /// radius `c * sqrt(2 ln t / n_i)` with `t` the total pull count.
    /// Untried arms score positive infinity so they are picked before any
    /// arm is revisited.
    pub fn ucb_score(&self, arm: usize) -> Result<f64> {
        let a = self
            .arms
            .get(arm)
            .ok_or_else(|| Error::Input(format!("arm {arm} out of range")))?;
        if a.pulls == 0 {
            return Ok(f64::INFINITY);
        }
        let t = self.total_pulls() as f64;
        let radius = self.exploration * (2.0 * t.ln() / a.pulls as f64).sqrt();
        Ok(a.mean() + radius)
    }

    /// Index of the highest-scoring arm; ties break toward the lowest
    /// index.
    pub fn select_arm(&self) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..self.arms.len() {
            let score = self.ucb_score(i).expect("index in range");
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        best
    }

    /// Records a reward for `arm`, clamping to [0, 1] (clamps are counted,
    /// not errors). Non-finite rewards are rejected.
    pub fn update_reward(&mut self, arm: usize, reward: f64) -> Result<()> {
        if !reward.is_finite() {
            return Err(Error::Input(format!(
                "reward for arm {arm} is not finite: {reward}"
            )));
        }
        let a = self
            .arms
            .get_mut(arm)
            .ok_or_else(|| Error::Input(format!("arm {arm} out of range")))?;
        let clamped = reward.clamp(0.0, 1.0);
        if clamped != reward {
            self.clamp_warnings += 1;
        }
        a.pulls += 1;
        a.reward_sum += clamped;
        Ok(())
    }

    /// Sampling distribution over sources derived from the UCB scores.
    ///
    /// Finite scores are shifted to be non-negative and normalized; every
    /// arm then keeps a floor of `0.01 / K` via
    /// `p = floor + (1 - K * floor) * p_raw`. Untried arms (infinite
    /// score) preempt the distribution: they split all mass beyond the
    /// floors granted to the already-tried arms.
    pub fn source_probabilities(&self) -> Vec<f64> {
        let k = self.arms.len();
        let floor = PROBABILITY_FLOOR_MASS / k as f64;
        let scores: Vec<f64> = (0..k)
            .map(|i| self.ucb_score(i).expect("index in range"))
            .collect();
        let untried = scores.iter().filter(|s| s.is_infinite()).count();
        if untried == k {
            return vec![1.0 / k as f64; k];
        }
        if untried > 0 {
            let tried = k - untried;
            let share = (1.0 - tried as f64 * floor) / untried as f64;
            return scores
                .iter()
                .map(|s| if s.is_infinite() { share } else { floor })
                .collect();
        }
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = scores.iter().map(|s| s - min).collect();
        let total: f64 = shifted.iter().sum();
        let raw: Vec<f64> = if total > 0.0 {
            shifted.iter().map(|s| s / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        };
        raw.iter()
            .map(|p| floor + (1.0 - k as f64 * floor) * p)
            .collect()
    }
}

/// Cumulative pseudo-regret of a simulated UCB1 run on Bernoulli arms,
/// checkpointed along the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub horizon: u64,
    pub true_means: Vec<f64>,
    /// (step, cumulative pseudo-regret) checkpoints, ending at the
    /// horizon.
    pub trace: Vec<(u64, f64)>,
    /// Classic UCB1 logarithmic bound for the same instance.
    pub analytic_bound: f64,
    pub final_regret: f64,
}

impl RegretTrace {
    /// Cumulative regret at the checkpoint closest to (and not after)
    /// `step`.
    pub fn regret_at(&self, step: u64) -> f64 {
        let mut value = 0.0;
        for &(t, r) in &self.trace {
            if t <= step {
                value = r;
            } else {
                break;
            }
        }
        value
    }
}

fn validate_means(means: &[f64]) -> Result<()> {
    if means.is_empty() {
        return Err(Error::Config("regret simulation needs at least one arm".into()));
    }
    for (i, m) in means.iter().enumerate() {
        if !m.is_finite() || !(0.0..=1.0).contains(m) {
            return Err(Error::Config(format!(
                "arm {i} mean {m} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Classic UCB1 regret bound
/// `sum_{i: gap>0} 8 ln T / gap_i + (1 + pi^2/3) sum_i gap_i`.
pub fn ucb_regret_bound(means: &[f64], horizon: u64) -> Result<f64> {
    validate_means(means)?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let best = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_t = (horizon as f64).ln();
    let mut bound = 0.0;
    let mut gap_sum = 0.0;
    for m in means {
        let gap = best - m;
        if gap > 0.0 {
            bound += 8.0 * log_t / gap;
            gap_sum += gap;
        }
    }
    bound += (1.0 + std::f64::consts::PI.powi(2) / 3.0) * gap_sum;
    Ok(bound)
}

/// Runs UCB1 against independent Bernoulli arms for `horizon` steps and
/// returns the checkpointed cumulative pseudo-regret (roughly 1000
/// checkpoints, always including the final step).
pub fn simulate_regret(means: &[f64], horizon: u64, seed: u64) -> Result<RegretTrace> {
    validate_means(means)?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let mut bandit = BanditState::new(means.len())?;
    let best = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let stride = (horizon / 1000).max(1);
    let mut regret = 0.0;
    let mut trace = Vec::new();
    for t in 1..=horizon {
        let arm = bandit.select_arm();
        let reward = if rng.random::<f64>() < means[arm] {
            1.0
        } else {
            0.0
        };
        bandit.update_reward(arm, reward)?;
        regret += best - means[arm];
        if t % stride == 0 || t == horizon {
            trace.push((t, regret));
        }
    }
    let analytic_bound = ucb_regret_bound(means, horizon)?;
    Ok(RegretTrace {
        horizon,
        true_means: means.to_vec(),
        trace,
        analytic_bound,
        final_regret: regret,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn empirical_mean_tracks_rewards() {
        let mut bandit = BanditState::new(2).unwrap();
        bandit.update_reward(0, 0.2).unwrap();
        bandit.update_reward(0, 0.4).unwrap();
        assert_abs_diff_eq!(bandit.arms()[0].mean(), 0.3, epsilon = 1e-15);
        assert_eq!(bandit.arms()[0].pulls, 2);
        assert_eq!(bandit.clamp_warnings(), 0);
    }

    #[test]
    fn out_of_range_reward_clamps_and_warns() {
        let mut bandit = BanditState::new(1).unwrap();
        bandit.update_reward(0, 1.7).unwrap();
        assert_abs_diff_eq!(bandit.arms()[0].mean(), 1.0, epsilon = 1e-15);
        assert_eq!(bandit.clamp_warnings(), 1);
        bandit.update_reward(0, -0.3).unwrap();
        assert_eq!(bandit.clamp_warnings(), 2);
        assert_abs_diff_eq!(bandit.arms()[0].mean(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_reward_rejected() {
        let mut bandit = BanditState::new(1).unwrap();
        assert!(matches!(
            bandit.update_reward(0, f64::NAN),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            bandit.update_reward(0, f64::INFINITY),
            Err(Error::Input(_))
        ));
        assert_eq!(bandit.total_pulls(), 0);
    }

    #[test]
    fn untried_arm_outranks_any_finite_score() {
        let mut bandit = BanditState::new(3).unwrap();
        bandit.update_reward(0, 1.0).unwrap();
        bandit.update_reward(1, 1.0).unwrap();
        assert_eq!(bandit.ucb_score(2).unwrap(), f64::INFINITY);
        assert!(bandit.ucb_score(2).unwrap() > bandit.ucb_score(0).unwrap());
        assert_eq!(bandit.select_arm(), 2);
    }

    #[test]
    fn every_arm_pulled_once_before_any_twice() {
        let k = 5;
        let mut bandit = BanditState::new(k).unwrap();
        for step in 0..k {
            let arm = bandit.select_arm();
            assert_eq!(
                bandit.arms()[arm].pulls,
                0,
                "step {step} revisited arm {arm} before all were tried"
            );
            bandit.update_reward(arm, 0.5).unwrap();
        }
        assert!(bandit.arms().iter().all(|a| a.pulls == 1));
    }

    #[test]
    fn hoeffding_concentration_on_bernoulli_arm() {
        let mut hits = 0;
        let seeds = 100;
        for seed in 0..seeds {
            let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
            let mut bandit = BanditState::new(1).unwrap();
            for _ in 0..10_000 {
                let r = if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 };
                bandit.update_reward(0, r).unwrap();
            }
            let mean = bandit.arms()[0].mean();
            if (0.57..=0.63).contains(&mean) {
                hits += 1;
            }
        }
        assert!(hits >= 99, "only {hits}/{seeds} runs inside [0.57, 0.63]");
    }

    #[test]
    fn probabilities_uniform_before_any_pull() {
        let bandit = BanditState::new(4).unwrap();
        let p = bandit.source_probabilities();
        for v in &p {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn untried_arms_preempt_probability_mass() {
        let mut bandit = BanditState::new(4).unwrap();
        bandit.update_reward(0, 0.9).unwrap();
        bandit.update_reward(1, 0.1).unwrap();
        let p = bandit.source_probabilities();
        let floor = PROBABILITY_FLOOR_MASS / 4.0;
        assert_abs_diff_eq!(p[0], floor, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], floor, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2], p[3], epsilon = 1e-15);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p[2] > 0.4);
    }

    #[test]
    fn probabilities_floor_and_order_follow_scores() {
        let mut bandit = BanditState::new(3).unwrap();
        // Give arm 0 a clearly better record over the same pull count.
        for _ in 0..10 {
            bandit.update_reward(0, 1.0).unwrap();
            bandit.update_reward(1, 0.2).unwrap();
            bandit.update_reward(2, 0.0).unwrap();
        }
        let p = bandit.source_probabilities();
        let floor = PROBABILITY_FLOOR_MASS / 3.0;
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
        for v in &p {
            assert!(*v >= floor - 1e-15);
        }
        // The worst arm sits exactly at the floor: equal pull counts make
        // its shifted score zero.
        assert_abs_diff_eq!(p[2], floor, epsilon = 1e-12);
    }

    #[test]
    fn equal_scores_normalize_to_uniform() {
        let mut bandit = BanditState::new(2).unwrap();
        bandit.update_reward(0, 0.5).unwrap();
        bandit.update_reward(1, 0.5).unwrap();
        let p = bandit.source_probabilities();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn regret_bound_matches_hand_computation() {
        // K = 2, means (0.9, 0.8), T = 1e4: 8 ln(1e4)/0.1 + (1 + pi^2/3) * 0.1.
        let bound = ucb_regret_bound(&[0.9, 0.8], 10_000).unwrap();
        assert_abs_diff_eq!(bound, 737.2562165714643, epsilon = 1e-9);
    }

    #[test]
    fn single_arm_has_zero_regret() {
        let trace = simulate_regret(&[0.7], 5000, 3).unwrap();
        assert_eq!(trace.final_regret, 0.0);
        assert!(trace.trace.iter().all(|&(_, r)| r == 0.0));
        assert_eq!(trace.trace.last().unwrap().0, 5000);
    }

    #[test]
    fn mean_regret_stays_below_analytic_bound() {
        let means = [0.9, 0.8];
        let horizon = 10_000;
        let bound = ucb_regret_bound(&means, horizon).unwrap();
        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            total += simulate_regret(&means, horizon, seed).unwrap().final_regret;
        }
        let mean_regret = total / seeds as f64;
        assert!(
            mean_regret < bound,
            "mean regret {mean_regret} exceeds bound {bound}"
        );
        assert!(mean_regret > 0.0);
    }

    #[test]
    fn per_step_regret_decreases_with_horizon() {
        let means = [0.9, 0.8];
        let seeds = 20;
        let mut early = 0.0;
        let mut late = 0.0;
        for seed in 0..seeds {
            let trace = simulate_regret(&means, 20_000, seed).unwrap();
            early += trace.regret_at(2_000);
            late += trace.final_regret;
        }
        let early_rate = early / seeds as f64 / 2_000.0;
        let late_rate = late / seeds as f64 / 20_000.0;
        assert!(
            late_rate < early_rate,
            "per-step regret did not shrink: {early_rate} -> {late_rate}"
        );
    }

    #[test]
    fn log_log_regret_slope_is_sublinear() {
        let means = [0.9, 0.8];
        let seeds = 10;
        let mut at_1k = 0.0;
        let mut at_100k = 0.0;
        for seed in 0..seeds {
            let trace = simulate_regret(&means, 100_000, seed).unwrap();
            at_1k += trace.regret_at(1_000);
            at_100k += trace.final_regret;
        }
        let slope = (at_100k / at_1k).ln() / (100.0f64).ln();
        assert!(slope < 0.6, "log-log regret slope {slope} not sublinear");
    }

    #[test]
    fn checkpoints_cover_horizon() {
        let trace = simulate_regret(&[0.9, 0.8], 12_345, 0).unwrap();
        assert_eq!(trace.trace.last().unwrap().0, 12_345);
        // Stride 12 gives ~1000 interior checkpoints plus the final step.
        assert!(trace.trace.len() >= 1000 && trace.trace.len() <= 1100);
        assert!(trace.trace.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(trace.trace.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn invalid_configurations_rejected() {
        assert!(matches!(BanditState::new(0), Err(Error::Config(_))));
        assert!(matches!(
            BanditState::with_exploration(2, -1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            simulate_regret(&[], 100, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            simulate_regret(&[0.5, 1.2], 100, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            simulate_regret(&[0.5], 0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ucb_regret_bound(&[f64::NAN], 10),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn means_stay_in_unit_interval(
            rewards in proptest::collection::vec((0usize..4, -5.0f64..5.0), 1..200)
        ) {
            let mut bandit = BanditState::new(4).unwrap();
            for (arm, r) in &rewards {
                bandit.update_reward(*arm, *r).unwrap();
            }
            prop_assert_eq!(bandit.total_pulls(), rewards.len() as u64);
            for arm in bandit.arms() {
                prop_assert!((0.0..=1.0).contains(&arm.mean()));
            }
        }

        #[test]
        fn probabilities_form_distribution(
            rewards in proptest::collection::vec((0usize..5, 0.0f64..1.0), 0..60)
        ) {
            let mut bandit = BanditState::new(5).unwrap();
            for (arm, r) in &rewards {
                bandit.update_reward(*arm, *r).unwrap();
            }
            let p = bandit.source_probabilities();
            prop_assert_eq!(p.len(), 5);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for v in &p {
                prop_assert!(*v > 0.0);
            }
        }
    }
}
