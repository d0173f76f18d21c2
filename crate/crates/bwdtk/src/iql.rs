//! Desk-scale implicit Q-learning with an optional Bellman-Wasserstein
//! actor regularizer.
//!
//! Three heads: a TD critic `Q(s,a)`, an expectile value head `V(s)`, and a
//! tanh-squashed deterministic actor trained by advantage-weighted
//! regression. The regularizer adds `-lambda * L(actor actions)` to the actor
//! loss, where `L` is the entropic dual objective evaluated with the actor's
//! actions on the behavior side and frozen behavioral-critic costs; the
//! potentials take one ascent step per actor step.

use serde::{Deserialize, Serialize};

use crate::approx::{optim_step, Network, OptimState};
use crate::bwd::{dual_objective, DualBatch, PotentialPair};
use crate::critic::{build_states, Critic};
use crate::dataset::{Dataset, RandomPolicy};
use crate::envgen::Env;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng;

/// Advantage exponent cap inside the AWR weight.
const AWR_EXP_CAP: f64 = 5.0;
/// Hard cap on the AWR weight itself.
const AWR_WEIGHT_CAP: f64 = 100.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IqlConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub expectile: f64,
    pub awr_temperature: f64,
    pub polyak: f64,
    /// `None` uses the dataset discount.
    pub discount: Option<f64>,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            steps: 50_000,
            batch_size: 256,
            hidden_dim: 256,
            learning_rate: 3e-4,
            expectile: 0.7,
            awr_temperature: 3.0,
            polyak: 0.005,
            discount: None,
        }
    }
}

/// Frozen inputs for the BWD actor regularizer.
pub struct RegSetup {
    pub critic: Critic,
    pub potentials: PotentialPair,
    pub random_policy: RandomPolicy,
    pub lambda: f64,
    pub k_negatives: usize,
    pub potential_lr: f64,
}

#[derive(Debug, Clone)]
pub struct IqlAgent {
    pub q_net: Network,
    pub q_target: Network,
    pub v_net: Network,
    pub actor_net: Network,
    pub discount: f64,
    pub expectile: f64,
    pub awr_temperature: f64,
    pub polyak: f64,
}

impl IqlAgent {
    pub fn new(obs_dim: usize, act_dim: usize, config: &IqlConfig, discount: f64, seed: u64) -> Result<Self> {
        let q_net = Network::new(obs_dim + act_dim, config.hidden_dim, 1, rng::child_seed(seed, "iql-q"))?;
        let q_target = q_net.clone();
        let v_net = Network::new(obs_dim, config.hidden_dim, 1, rng::child_seed(seed, "iql-v"))?;
        let actor_net = Network::new(obs_dim, config.hidden_dim, act_dim, rng::child_seed(seed, "iql-actor"))?;
        Ok(IqlAgent {
            q_net,
            q_target,
            v_net,
            actor_net,
            discount,
            expectile: config.expectile,
            awr_temperature: config.awr_temperature,
            polyak: config.polyak,
        })
    }

    /// Deterministic policy: `tanh` of the actor head.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let out = self.actor_net.forward(&Mat::from_row(state))?;
        Ok(out.data.iter().map(|&p| p.tanh()).collect())
    }
}

fn build_inputs(batch: &[&crate::dataset::Transition], obs_dim: usize, act_dim: usize) -> (Mat, Mat, Mat, Vec<f64>, Vec<f64>) {
    let b = batch.len();
    let mut sa = Mat::zeros(b, obs_dim + act_dim);
    let mut s = Mat::zeros(b, obs_dim);
    let mut s_next = Mat::zeros(b, obs_dim);
    let mut rewards = Vec::with_capacity(b);
    let mut not_done = Vec::with_capacity(b);
    for (i, t) in batch.iter().enumerate() {
        sa.row_mut(i)[..obs_dim].copy_from_slice(&t.state);
        sa.row_mut(i)[obs_dim..].copy_from_slice(&t.action);
        s.row_mut(i).copy_from_slice(&t.state);
        s_next.row_mut(i).copy_from_slice(&t.next_state);
        rewards.push(t.reward);
        not_done.push(if t.terminal { 0.0 } else { 1.0 });
    }
    (sa, s, s_next, rewards, not_done)
}

struct Trainer {
    q_optim: OptimState,
    v_optim: OptimState,
    actor_optim: OptimState,
    reg_g_optim: Option<OptimState>,
    reg_f_optim: Option<OptimState>,
}

/// One gradient step on all three heads. Exposed for testing; use
/// [`train_iql`] for full runs.
fn iql_step(
    agent: &mut IqlAgent,
    dataset: &Dataset,
    batch_idx: &[usize],
    trainer: &mut Trainer,
    reg: Option<&mut RegSetup>,
    reg_rng: &mut rand_chacha::ChaCha8Rng,
    step: usize,
) -> Result<f64> {
    let batch: Vec<&crate::dataset::Transition> =
        batch_idx.iter().map(|&i| &dataset.transitions[i]).collect();
    let b = batch.len();
    let obs_dim = dataset.obs_dim;
    let act_dim = dataset.act_dim;
    let (sa, s, s_next, rewards, not_done) = build_inputs(&batch, obs_dim, act_dim);
    let bn = b as f64;

    // --- value head: expectile regression toward Q_target(s, a) ---
    let q_tgt_sa = agent.q_target.forward(&sa)?;
    let v_cache = agent.v_net.forward_cached(&s)?;
    let mut v_up = Mat::zeros(b, 1);
    for i in 0..b {
        let diff = q_tgt_sa.data[i] - v_cache.output.data[i];
        let weight = if diff > 0.0 { agent.expectile } else { 1.0 - agent.expectile };
        // d/dV of weight * diff^2 = -2 * weight * diff
        v_up.data[i] = -2.0 * weight * diff / bn;
    }
    let (v_grads, _) = agent.v_net.backward_from_cache(&s, &v_up, &v_cache)?;
    let v_values_next = agent.v_net.forward(&s_next)?;

    // --- critic: TD regression toward r + gamma * V(s') ---
    let q_cache = agent.q_net.forward_cached(&sa)?;
    let mut q_up = Mat::zeros(b, 1);
    let mut td_loss = 0.0;
    for i in 0..b {
        let target = rewards[i] + agent.discount * not_done[i] * v_values_next.data[i];
        let diff = q_cache.output.data[i] - target;
        td_loss += diff * diff / bn;
        q_up.data[i] = 2.0 * diff / bn;
    }
    if !td_loss.is_finite() {
        return Err(Error::Numeric { step, msg: "non-finite TD loss".to_string() });
    }
    let (q_grads, _) = agent.q_net.backward_from_cache(&sa, &q_up, &q_cache)?;

    // --- actor: advantage-weighted regression onto dataset actions ---
    let v_values = &v_cache.output;
    let actor_cache = agent.actor_net.forward_cached(&s)?;
    let mut actor_up = Mat::zeros(b, act_dim);
    for i in 0..b {
        let adv = q_tgt_sa.data[i] - v_values.data[i];
        let weight = ((adv / agent.awr_temperature).min(AWR_EXP_CAP).exp()).min(AWR_WEIGHT_CAP);
        for c in 0..act_dim {
            let pre = actor_cache.output.row(i)[c];
            let out = pre.tanh();
            let diff = out - batch[i].action[c];
            // chain through tanh; mean over batch
            actor_up.row_mut(i)[c] = weight * 2.0 * diff * (1.0 - out * out) / bn;
        }
    }

    // --- BWD regularizer: subtract lambda * d L / d actor params ---
    if let Some(reg) = reg {
        if reg.lambda != 0.0 {
            let states_vec: Vec<Vec<f64>> = batch.iter().map(|t| t.state.clone()).collect();
            let actor_actions: Vec<Vec<f64>> = (0..b)
                .map(|i| {
                    actor_cache.output.row(i).iter().map(|&p| p.tanh()).collect()
                })
                .collect();
            let negatives: Vec<Vec<f64>> = (0..b * reg.k_negatives)
                .map(|_| reg.random_policy.sample(reg_rng))
                .collect();
            let dual_batch = DualBatch {
                states: states_vec,
                behavior_actions: actor_actions.clone(),
                negatives,
                k: reg.k_negatives,
            };
            let mut outcome = dual_objective(&reg.potentials, &reg.critic, &dual_batch)
                .map_err(|e| match e {
                    Error::Numeric { msg, .. } => Error::Numeric { step, msg },
                    other => other,
                })?;
            // actor loss includes -lambda * L, so subtract the ascent
            // direction, chained through the tanh squash
            for i in 0..b {
                for c in 0..act_dim {
                    let out = actor_actions[i][c];
                    actor_up.row_mut(i)[c] -=
                        reg.lambda * outcome.action_grad.row(i)[c] * (1.0 - out * out);
                }
            }
            // one dual ascent step on the potentials
            outcome.g_grads.scale(-1.0);
            outcome.f_grads.scale(-1.0);
            optim_step(
                &mut reg.potentials.g_net,
                &outcome.g_grads,
                trainer.reg_g_optim.as_mut().expect("reg optimizer present"),
            )?;
            optim_step(
                &mut reg.potentials.f_net,
                &outcome.f_grads,
                trainer.reg_f_optim.as_mut().expect("reg optimizer present"),
            )?;
        }
    }

    let (actor_grads, _) = agent.actor_net.backward_from_cache(&s, &actor_up, &actor_cache)?;

    optim_step(&mut agent.v_net, &v_grads, &mut trainer.v_optim)?;
    optim_step(&mut agent.q_net, &q_grads, &mut trainer.q_optim)?;
    optim_step(&mut agent.actor_net, &actor_grads, &mut trainer.actor_optim)?;
    agent.q_target.polyak_from(&agent.q_net, agent.polyak);
    Ok(td_loss)
}

/// Trains a desk-scale IQL agent. With `reg = Some(..)` and a non-zero
/// `lambda`, adds the BWD actor regularizer; `lambda = 0` reproduces the
/// unregularized run bit for bit.
pub fn train_iql(
    dataset: &Dataset,
    config: &IqlConfig,
    mut reg: Option<RegSetup>,
    seed: u64,
) -> Result<(IqlAgent, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("cannot train on an empty dataset".to_string()));
    }
    let discount = match config.discount {
        Some(d) => d,
        None => dataset.discount,
    };
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::invalid_argument(format!("discount must be in [0, 1), got {discount}")));
    }
    if !(0.0..1.0).contains(&config.expectile) || config.expectile < 0.5 {
        return Err(Error::invalid_argument(format!(
            "expectile must be in [0.5, 1), got {}",
            config.expectile
        )));
    }
    let mut agent = IqlAgent::new(dataset.obs_dim, dataset.act_dim, config, discount, seed)?;
    let mut trainer = Trainer {
        q_optim: OptimState::new(&agent.q_net, config.learning_rate),
        v_optim: OptimState::new(&agent.v_net, config.learning_rate),
        actor_optim: OptimState::new(&agent.actor_net, config.learning_rate),
        reg_g_optim: reg.as_ref().map(|r| OptimState::new(&r.potentials.g_net, r.potential_lr)),
        reg_f_optim: reg.as_ref().map(|r| OptimState::new(&r.potentials.f_net, r.potential_lr)),
    };
    let mut batch_rng = rng::stream(seed, "iql-batches");
    // the regularizer draws from its own stream so that lambda = 0 and
    // reg = None produce identical base-stream consumption
    let mut reg_rng = rng::stream(seed, "iql-reg");
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = dataset.sample_indices(config.batch_size, &mut batch_rng)?;
        let loss = iql_step(
            &mut agent,
            dataset,
            &idx,
            &mut trainer,
            reg.as_mut(),
            &mut reg_rng,
            step,
        )?;
        trace.push(loss);
    }
    Ok((agent, trace))
}

/// Mean undiscounted return of the deterministic actor over `n_episodes`.
pub fn evaluate_agent(env: &dyn Env, agent: &IqlAgent, n_episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for ep in 0..n_episodes {
        let mut rng = rng::stream(rng::child_seed(seed, "iql-eval"), &format!("episode-{ep}"));
        let mut state = env.reset(&mut rng);
        for _ in 0..env.max_steps() {
            let action: Vec<f64> = agent
                .act(&state)?
                .into_iter()
                .map(|a| a.clamp(-1.0, 1.0))
                .collect();
            let (next, reward, terminal) = env.step(&state, &action, &mut rng);
            total += reward;
            state = next;
            if terminal {
                break;
            }
        }
    }
    Ok(total / n_episodes as f64)
}

/// Behavior cloning: the same actor head trained with unit AWR weights.
pub fn train_bc(dataset: &Dataset, config: &IqlConfig, seed: u64) -> Result<IqlAgent> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("cannot train on an empty dataset".to_string()));
    }
    let discount = config.discount.unwrap_or(dataset.discount);
    let mut agent = IqlAgent::new(dataset.obs_dim, dataset.act_dim, config, discount, seed)?;
    let mut optim = OptimState::new(&agent.actor_net, config.learning_rate);
    let mut batch_rng = rng::stream(seed, "bc-batches");
    let act_dim = dataset.act_dim;
    for step in 0..config.steps {
        let batch = dataset.sample_batch(config.batch_size, &mut batch_rng)?;
        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let s = build_states(&states, None);
        let cache = agent.actor_net.forward_cached(&s)?;
        let bn = batch.len() as f64;
        let mut up = Mat::zeros(batch.len(), act_dim);
        let mut loss = 0.0;
        for i in 0..batch.len() {
            for c in 0..act_dim {
                let out = cache.output.row(i)[c].tanh();
                let diff = out - batch[i].action[c];
                loss += diff * diff / bn;
                up.row_mut(i)[c] = 2.0 * diff * (1.0 - out * out) / bn;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric { step, msg: "non-finite BC loss".to_string() });
        }
        let (grads, _) = agent.actor_net.backward_from_cache(&s, &up, &cache)?;
        optim_step(&mut agent.actor_net, &grads, &mut optim)?;
    }
    Ok(agent)
}
