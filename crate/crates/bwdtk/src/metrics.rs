//! The four baseline dataset-quality estimators: mean reward, mean behavioral
//! Q, mean advantage, and the performance-difference score against the random
//! reference policy.

use serde::{Deserialize, Serialize};

use crate::critic::{Critic, ValueHead};
use crate::dataset::{Dataset, RandomPolicy};
use crate::error::{Error, Result};
use crate::linalg::mean;
use crate::rng;

pub const DEFAULT_N_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_reward: f64,
    pub mean_q: f64,
    pub mean_advantage: f64,
    /// `(1 / (1 - gamma)) * E[Q(s, a') - V(s)]` with `a'` from the random
    /// policy and states from the dataset marginal.
    pub pd_random: f64,
    /// The same estimate without the `1 / (1 - gamma)` factor.
    pub pd_random_unscaled: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

fn sampled_indices(dataset: &Dataset, n_samples: usize, seed: u64, label: &str) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("dataset is empty".to_string()));
    }
    if dataset.len() <= n_samples {
        // smaller than the sample budget: use every transition once
        return Ok((0..dataset.len()).collect());
    }
    let mut r = rng::stream(seed, label);
    dataset.sample_indices(n_samples, &mut r)
}

/// Sample mean of the reward over uniformly sampled transitions.
pub fn mean_reward(dataset: &Dataset, n_samples: usize, seed: u64) -> Result<f64> {
    let idx = sampled_indices(dataset, n_samples, seed, "metric-reward")?;
    Ok(mean(
        &idx.iter()
            .map(|&i| dataset.transitions[i].reward)
            .collect::<Vec<_>>(),
    ))
}

/// Sample mean of Q over sampled dataset state-action pairs.
pub fn mean_q(critic: &Critic, dataset: &Dataset, n_samples: usize, seed: u64) -> Result<f64> {
    let idx = sampled_indices(dataset, n_samples, seed, "metric-q")?;
    let states: Vec<&[f64]> = idx
        .iter()
        .map(|&i| dataset.transitions[i].state.as_slice())
        .collect();
    let actions: Vec<&[f64]> = idx
        .iter()
        .map(|&i| dataset.transitions[i].action.as_slice())
        .collect();
    Ok(mean(&critic.q_values(&states, &actions)?))
}

/// Sample mean of `Q(s, a) - V(s)` over sampled dataset pairs.
pub fn mean_advantage(
    critic: &Critic,
    value_head: &ValueHead,
    dataset: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let idx = sampled_indices(dataset, n_samples, seed, "metric-adv")?;
    let states: Vec<&[f64]> = idx
        .iter()
        .map(|&i| dataset.transitions[i].state.as_slice())
        .collect();
    let actions: Vec<&[f64]> = idx
        .iter()
        .map(|&i| dataset.transitions[i].action.as_slice())
        .collect();
    let q = critic.q_values(&states, &actions)?;
    let v = value_head.values(&states)?;
    Ok(mean(
        &q.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>(),
    ))
}

/// Performance-difference estimate `J(pi_rand) - J(beta)` using the dataset
/// state marginal in place of the random policy's visitation distribution:
/// `(1 / (1 - gamma)) * E_s E_{a'}[Q(s, a') - V(s)]` with `k_actions` random
/// actions per sampled state. Returns `(scaled, unscaled)`.
pub fn pd_random(
    critic: &Critic,
    value_head: &ValueHead,
    dataset: &Dataset,
    random_policy: &RandomPolicy,
    n_samples: usize,
    k_actions: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if critic.discount >= 1.0 {
        return Err(Error::invalid_argument("pd_random needs discount < 1".to_string()));
    }
    if k_actions == 0 {
        return Err(Error::invalid_argument("k_actions must be >= 1".to_string()));
    }
    let idx = sampled_indices(dataset, n_samples, seed, "metric-pd")?;
    let mut action_rng = rng::stream(seed, "metric-pd-actions");
    let states: Vec<&[f64]> = idx
        .iter()
        .map(|&i| dataset.transitions[i].state.as_slice())
        .collect();
    let v = value_head.values(&states)?;

    // evaluate in chunks to bound the batch size at k_actions * chunk
    let chunk = 2048usize.div_ceil(k_actions).max(1);
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut pending_states: Vec<&[f64]> = Vec::new();
    let mut pending_actions: Vec<Vec<f64>> = Vec::new();
    let mut pending_v: Vec<f64> = Vec::new();
    let flush = |states_k: &mut Vec<&[f64]>,
                     actions_k: &mut Vec<Vec<f64>>,
                     v_k: &mut Vec<f64>,
                     acc: &mut f64,
                     count: &mut usize|
     -> Result<()> {
        if states_k.is_empty() {
            return Ok(());
        }
        let action_refs: Vec<&[f64]> = actions_k.iter().map(|a| a.as_slice()).collect();
        let q = critic.q_values(states_k, &action_refs)?;
        for (qi, vi) in q.iter().zip(v_k.iter()) {
            *acc += qi - vi;
            *count += 1;
        }
        states_k.clear();
        actions_k.clear();
        v_k.clear();
        Ok(())
    };
    for (i, &s) in states.iter().enumerate() {
        for _ in 0..k_actions {
            pending_states.push(s);
            pending_actions.push(random_policy.sample(&mut action_rng));
            pending_v.push(v[i]);
        }
        if pending_states.len() >= chunk * k_actions {
            flush(
                &mut pending_states,
                &mut pending_actions,
                &mut pending_v,
                &mut acc,
                &mut count,
            )?;
        }
    }
    flush(
        &mut pending_states,
        &mut pending_actions,
        &mut pending_v,
        &mut acc,
        &mut count,
    )?;
    let unscaled = acc / count as f64;
    Ok((unscaled / (1.0 - critic.discount), unscaled))
}

/// Computes all four baseline metrics with a shared sample budget.
pub fn metric_report(
    critic: &Critic,
    value_head: &ValueHead,
    dataset: &Dataset,
    random_policy: &RandomPolicy,
    n_samples: usize,
    k_actions: usize,
    seed: u64,
    config_hash: String,
) -> Result<MetricReport> {
    let (pd, pd_unscaled) = pd_random(
        critic,
        value_head,
        dataset,
        random_policy,
        n_samples,
        k_actions,
        seed,
    )?;
    Ok(MetricReport {
        mean_reward: mean_reward(dataset, n_samples, seed)?,
        mean_q: mean_q(critic, dataset, n_samples, seed)?,
        mean_advantage: mean_advantage(critic, value_head, dataset, n_samples, seed)?,
        pd_random: pd,
        pd_random_unscaled: pd_unscaled,
        n_samples: n_samples.min(dataset.len()),
        seeds: vec![seed],
        config_hash,
    })
}
