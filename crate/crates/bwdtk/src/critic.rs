//! Behavioral action-value estimation: SARSA regression of Q on dataset
//! transitions with a Polyak-averaged target network, plus a fitted state
//! value head used by the advantage and performance-difference metrics.

use serde::{Deserialize, Serialize};

use crate::approx::{optim_step, Network, OptimState};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng;

/// Per-dimension state standardization computed over the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Self {
        let d = dataset.obs_dim;
        let n = dataset.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for t in &dataset.transitions {
            for (m, &s) in mean.iter_mut().zip(&t.state) {
                *m += s;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for t in &dataset.transitions {
            for ((v, &m), &s) in var.iter_mut().zip(&mean).zip(&t.state) {
                *v += (s - m) * (s - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| ((v / n).sqrt()).max(1e-6))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, state: &[f64], out: &mut [f64]) {
        for i in 0..state.len() {
            out[i] = (state[i] - self.mean[i]) / self.std[i];
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub polyak: f64,
    pub discount: Option<f64>,
    pub standardize: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            steps: 10_000,
            batch_size: 256,
            hidden_dim: 256,
            learning_rate: 3e-4,
            polyak: 0.005,
            discount: None,
            standardize: true,
        }
    }
}

/// The trained behavioral critic Q(s, a).
#[derive(Debug, Clone)]
pub struct Critic {
    pub q_net: Network,
    pub q_target: Network,
    pub polyak: f64,
    pub discount: f64,
    pub standardizer: Option<Standardizer>,
}

/// Fitted approximation of the state value under the behavior policy.
#[derive(Debug, Clone)]
pub struct ValueHead {
    pub v_net: Network,
    pub standardizer: Option<Standardizer>,
}

impl Critic {
    /// Builds the standardized `[state, action]` input batch.
    pub fn build_input(&self, states: &[&[f64]], actions: &[&[f64]]) -> Mat {
        build_state_action(states, actions, self.standardizer.as_ref())
    }

    /// Evaluates Q on a batch of state/action pairs.
    pub fn q_values(&self, states: &[&[f64]], actions: &[&[f64]]) -> Result<Vec<f64>> {
        if states.len() != actions.len() {
            return Err(Error::invalid_argument(
                "states and actions must have equal length".to_string(),
            ));
        }
        let input = self.build_input(states, actions);
        Ok(self.q_net.forward(&input)?.data)
    }

    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.q_values(&[state], &[action])?[0])
    }
}

impl ValueHead {
    pub fn values(&self, states: &[&[f64]]) -> Result<Vec<f64>> {
        let input = build_states(states, self.standardizer.as_ref());
        Ok(self.v_net.forward(&input)?.data)
    }
}

pub fn build_state_action(
    states: &[&[f64]],
    actions: &[&[f64]],
    standardizer: Option<&Standardizer>,
) -> Mat {
    let b = states.len();
    let obs = states.first().map_or(0, |s| s.len());
    let act = actions.first().map_or(0, |a| a.len());
    let mut input = Mat::zeros(b, obs + act);
    for i in 0..b {
        let row = input.row_mut(i);
        match standardizer {
            Some(st) => st.apply(states[i], &mut row[..obs]),
            None => row[..obs].copy_from_slice(states[i]),
        }
        row[obs..].copy_from_slice(actions[i]);
    }
    input
}

pub fn build_states(states: &[&[f64]], standardizer: Option<&Standardizer>) -> Mat {
    let b = states.len();
    let obs = states.first().map_or(0, |s| s.len());
    let mut input = Mat::zeros(b, obs);
    for i in 0..b {
        let row = input.row_mut(i);
        match standardizer {
            Some(st) => st.apply(states[i], row),
            None => row.copy_from_slice(states[i]),
        }
    }
    input
}

/// Fits the behavioral critic by minimizing the SARSA TD error
/// `(r + gamma * (1 - terminal) * Q_target(s', a') - Q(s, a))^2` over
/// minibatches. Transitions without a next action are treated as terminal.
/// Returns the per-step loss trace.
pub fn train_critic(
    dataset: &Dataset,
    config: &CriticConfig,
    seed: u64,
) -> Result<(Critic, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("cannot train a critic on an empty dataset".to_string()));
    }
    let discount = config.discount.unwrap_or(dataset.discount);
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::invalid_argument(format!(
            "discount must be in [0,1), got {discount}"
        )));
    }
    let standardizer = config.standardize.then(|| Standardizer::fit(dataset));
    let input_dim = dataset.obs_dim + dataset.act_dim;
    let q_net = Network::new(
        input_dim,
        config.hidden_dim,
        1,
        rng::child_seed(seed, "critic-q"),
    )?;
    let q_target = q_net.clone();
    let mut critic = Critic {
        q_net,
        q_target,
        polyak: config.polyak,
        discount,
        standardizer,
    };
    let mut optim = OptimState::new(&critic.q_net, config.learning_rate);
    let mut batch_rng = rng::stream(seed, "critic-batches");
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let indices = dataset.sample_indices(config.batch_size, &mut batch_rng)?;
        let b = indices.len();

        let states: Vec<&[f64]> = indices
            .iter()
            .map(|&i| dataset.transitions[i].state.as_slice())
            .collect();
        let actions: Vec<&[f64]> = indices
            .iter()
            .map(|&i| dataset.transitions[i].action.as_slice())
            .collect();
        let input = critic.build_input(&states, &actions);

        // SARSA targets from the target network; absent next_action => r
        let mut bootstrap_rows: Vec<usize> = Vec::new();
        let mut next_states: Vec<&[f64]> = Vec::new();
        let mut next_actions: Vec<&[f64]> = Vec::new();
        for (row, &i) in indices.iter().enumerate() {
            let t = &dataset.transitions[i];
            if !t.terminal {
                if let Some(na) = &t.next_action {
                    bootstrap_rows.push(row);
                    next_states.push(t.next_state.as_slice());
                    next_actions.push(na.as_slice());
                }
            }
        }
        let mut targets: Vec<f64> = indices
            .iter()
            .map(|&i| dataset.transitions[i].reward)
            .collect();
        if !bootstrap_rows.is_empty() {
            let next_input =
                build_state_action(&next_states, &next_actions, critic.standardizer.as_ref());
            let next_q = critic.q_target.forward(&next_input)?;
            for (k, &row) in bootstrap_rows.iter().enumerate() {
                targets[row] += discount * next_q.data[k];
            }
        }

        let cache = critic.q_net.forward_cached(&input)?;
        let mut loss = 0.0;
        let mut upstream = Mat::zeros(b, 1);
        for row in 0..b {
            let diff = cache.output.data[row] - targets[row];
            loss += diff * diff;
            upstream.data[row] = 2.0 * diff / b as f64;
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step,
                msg: format!("non-finite critic loss {loss}"),
            });
        }
        trace.push(loss);

        let (grads, _) = critic
            .q_net
            .backward_from_cache(&input, &upstream, &cache)?;
        optim_step(&mut critic.q_net, &grads, &mut optim)?;
        let polyak = critic.polyak;
        let q_net_snapshot = critic.q_net.clone();
        critic.q_target.polyak_from(&q_net_snapshot, polyak);
    }
    Ok((critic, trace))
}

/// Regresses V(s) onto stop-gradient Q(s, a) over dataset pairs; a one-sample
/// estimate of the behavior-conditional mean of Q at each state.
pub fn fit_value_head(
    critic: &Critic,
    dataset: &Dataset,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ValueHead> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("cannot fit a value head on an empty dataset".to_string()));
    }
    let v_net = Network::new(
        dataset.obs_dim,
        critic.q_net.hidden_dim,
        1,
        rng::child_seed(seed, "value-head"),
    )?;
    let mut head = ValueHead {
        v_net,
        standardizer: critic.standardizer.clone(),
    };
    let mut optim = OptimState::new(&head.v_net, 3e-4);
    let mut batch_rng = rng::stream(seed, "value-head-batches");

    for step in 0..steps {
        let indices = dataset.sample_indices(batch_size, &mut batch_rng)?;
        let b = indices.len();
        let states: Vec<&[f64]> = indices
            .iter()
            .map(|&i| dataset.transitions[i].state.as_slice())
            .collect();
        let actions: Vec<&[f64]> = indices
            .iter()
            .map(|&i| dataset.transitions[i].action.as_slice())
            .collect();
        let targets = critic.q_values(&states, &actions)?;
        let input = build_states(&states, head.standardizer.as_ref());
        let cache = head.v_net.forward_cached(&input)?;
        let mut upstream = Mat::zeros(b, 1);
        let mut loss = 0.0;
        for row in 0..b {
            let diff = cache.output.data[row] - targets[row];
            loss += diff * diff;
            upstream.data[row] = 2.0 * diff / b as f64;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step,
                msg: "non-finite value-head loss".to_string(),
            });
        }
        let (grads, _) = head.v_net.backward_from_cache(&input, &upstream, &cache)?;
        optim_step(&mut head.v_net, &grads, &mut optim)?;
    }
    Ok(head)
}
