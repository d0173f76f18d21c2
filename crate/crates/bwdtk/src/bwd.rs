//! The Bellman-Wasserstein distance: a value-aware cost between dataset
//! state-action pairs and state-random-action pairs, estimated through the
//! entropic dual with two learned potentials, plus a log-domain Sinkhorn
//! solver used as a discrete validation oracle.
//!
//! The dual objective over a minibatch of `B` behavior pairs with `K` random
//! actions per state is
//!
//! `L = mean g(s,a) + mean f(s,a') - eps * mean exp((g + f - c) / eps)`
//!
//! with cost `c = Q(s,a') - |a' - a|^2`. At the optimum this objective equals
//! the entropic primal value minus `eps` (the constant term of the dual is
//! dropped, so the zero-cost optimum sits at `-eps`, not 0).

use serde::{Deserialize, Serialize};

use crate::approx::{optim_step, Gradients, Network, OptimState};
use crate::critic::Critic;
use crate::dataset::{Dataset, RandomPolicy};
use crate::error::{Error, Result};
use crate::linalg::{mean, squared_distance, Mat};
use crate::rng;

/// Largest exponent fed to `exp` in the regularization term; larger values
/// are clipped and counted.
pub const MAX_EXPONENT: f64 = 30.0;

/// Fraction of clipped exponent terms above which a run is rejected.
pub const MAX_CLIP_FRACTION: f64 = 0.01;

/// The two dual potentials with the entropic weight and cost scaling.
#[derive(Debug, Clone)]
pub struct PotentialPair {
    pub g_net: Network,
    pub f_net: Network,
    pub epsilon: f64,
    pub cost_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BwdConfig {
    pub ot_steps: usize,
    pub batch_size: usize,
    pub k_negatives: usize,
    pub holdout_fraction: f64,
    pub eval_batches: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    /// `None` selects `1 / max(1, median |Q|)` from a 1000-sample probe.
    pub cost_scale: Option<f64>,
}

impl Default for BwdConfig {
    fn default() -> Self {
        BwdConfig {
            ot_steps: 10_000,
            batch_size: 256,
            k_negatives: 8,
            holdout_fraction: 0.1,
            eval_batches: 32,
            hidden_dim: 256,
            learning_rate: 3e-4,
            epsilon: 1.0,
            cost_scale: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BwdEstimate {
    /// Dual value in unscaled cost units (raw value divided by `cost_scale`).
    pub value: f64,
    pub std_error: f64,
    /// Dual value in the scaled units the potentials were trained in.
    pub value_scaled: f64,
    pub epsilon: f64,
    pub cost_scale: f64,
    pub config_hash: String,
}

/// `cost_scale * (Q(s, a') - |a' - a|^2)`; the Q is evaluated at the random
/// action.
pub fn bwd_cost(
    critic: &Critic,
    cost_scale: f64,
    state: &[f64],
    behavior_action: &[f64],
    random_action: &[f64],
) -> Result<f64> {
    if behavior_action.len() != random_action.len() {
        return Err(Error::invalid_argument("action dims differ".to_string()));
    }
    let q = critic.q_value(state, random_action)?;
    Ok(cost_scale * (q - squared_distance(random_action, behavior_action)))
}

/// A minibatch of behavior pairs, each with `k` negatives sharing its state.
#[derive(Debug, Clone)]
pub struct DualBatch {
    pub states: Vec<Vec<f64>>,
    pub behavior_actions: Vec<Vec<f64>>,
    /// `states.len() * k` random actions, grouped by behavior index.
    pub negatives: Vec<Vec<f64>>,
    pub k: usize,
}

impl DualBatch {
    pub fn sample(
        dataset: &Dataset,
        indices: &[usize],
        batch_size: usize,
        k: usize,
        policy: &RandomPolicy,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        use rand::Rng;
        if indices.is_empty() {
            return Err(Error::invalid_argument("empty index pool for dual batch".to_string()));
        }
        let mut states = Vec::with_capacity(batch_size);
        let mut behavior_actions = Vec::with_capacity(batch_size);
        let mut negatives = Vec::with_capacity(batch_size * k);
        for _ in 0..batch_size {
            let t = &dataset.transitions[indices[rng.gen_range(0..indices.len())]];
            states.push(t.state.clone());
            behavior_actions.push(t.action.clone());
            for _ in 0..k {
                negatives.push(policy.sample(rng));
            }
        }
        Ok(DualBatch {
            states,
            behavior_actions,
            negatives,
            k,
        })
    }
}

/// Everything a dual-objective evaluation produces: the value, exact
/// parameter gradients for both potentials, the gradient of the value with
/// respect to the behavior actions (used by the policy regularizer), and
/// exponent-guard statistics.
pub struct DualOutcome {
    pub value: f64,
    pub g_grads: Gradients,
    pub f_grads: Gradients,
    pub action_grad: Mat,
    pub clipped: usize,
    pub terms: usize,
    pub max_exponent: f64,
}

fn concat_rows(states: &[Vec<f64>], actions: &[Vec<f64>], repeat: usize) -> Mat {
    let b = actions.len();
    let obs = states[0].len();
    let act = actions[0].len();
    let mut m = Mat::zeros(b, obs + act);
    for i in 0..b {
        let row = m.row_mut(i);
        row[..obs].copy_from_slice(&states[state_index(i, repeat)]);
        row[obs..].copy_from_slice(&actions[i]);
    }
    m
}

#[inline]
fn state_index(row: usize, repeat: usize) -> usize {
    if repeat <= 1 {
        row
    } else {
        row / repeat
    }
}

/// Evaluates the entropic dual objective and its exact gradients.
pub fn dual_objective(
    potentials: &PotentialPair,
    critic: &Critic,
    batch: &DualBatch,
) -> Result<DualOutcome> {
    let b = batch.states.len();
    let k = batch.k;
    if b == 0 || k == 0 {
        return Err(Error::invalid_argument("dual batch must be non-empty with k >= 1".to_string()));
    }
    if batch.negatives.len() != b * k {
        return Err(Error::invalid_argument("negatives length must be batch * k".to_string()));
    }
    let eps = potentials.epsilon;
    let scale = potentials.cost_scale;
    let obs = batch.states[0].len();
    let act = batch.behavior_actions[0].len();

    let g_input = concat_rows(&batch.states, &batch.behavior_actions, 1);
    let f_input = concat_rows(&batch.states, &batch.negatives, k);

    // critic evaluated at the random actions
    let q_states: Vec<&[f64]> = (0..b * k)
        .map(|row| batch.states[row / k].as_slice())
        .collect();
    let q_actions: Vec<&[f64]> = batch.negatives.iter().map(|a| a.as_slice()).collect();
    let q_vals = critic.q_values(&q_states, &q_actions)?;

    let g_cache = potentials.g_net.forward_cached(&g_input)?;
    let f_cache = potentials.f_net.forward_cached(&f_input)?;
    let g_out = &g_cache.output.data;
    let f_out = &f_cache.output.data;

    let bn = b as f64;
    let bkn = (b * k) as f64;
    let mut exp_terms = vec![0.0; b * k];
    let mut clipped = 0usize;
    let mut max_exponent = f64::NEG_INFINITY;
    for i in 0..b {
        for kk in 0..k {
            let row = i * k + kk;
            let cost = scale
                * (q_vals[row]
                    - squared_distance(&batch.negatives[row], &batch.behavior_actions[i]));
            let z = (g_out[i] + f_out[row] - cost) / eps;
            max_exponent = max_exponent.max(z);
            if z > MAX_EXPONENT {
                clipped += 1;
                exp_terms[row] = -MAX_EXPONENT.exp(); // negative marks a clipped term
            } else {
                exp_terms[row] = z.exp();
            }
        }
    }
    let mut exp_mean = 0.0;
    for &e in &exp_terms {
        exp_mean += e.abs();
    }
    exp_mean /= bkn;
    let value = mean(g_out) + mean(f_out) - eps * exp_mean;
    if !value.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            msg: format!("non-finite dual objective (max exponent {max_exponent})"),
        });
    }

    // upstream gradients; clipped terms have zero derivative
    let mut g_up = Mat::zeros(b, 1);
    let mut f_up = Mat::zeros(b * k, 1);
    let mut action_grad = Mat::zeros(b, act);
    for i in 0..b {
        let mut sum_e = 0.0;
        for kk in 0..k {
            let row = i * k + kk;
            let e = exp_terms[row];
            let live = if e >= 0.0 { e } else { 0.0 };
            sum_e += live;
            f_up.data[row] = (1.0 - live) / bkn;
            // cost path: d value / d a_i += (1/BK) e * 2 * scale * (a' - a_i)
            if live > 0.0 {
                let coeff = live / bkn * 2.0 * scale;
                let neg = &batch.negatives[row];
                let beh = &batch.behavior_actions[i];
                let ag = action_grad.row_mut(i);
                for c in 0..act {
                    ag[c] += coeff * (neg[c] - beh[c]);
                }
            }
        }
        g_up.data[i] = 1.0 / bn - sum_e / bkn;
    }
    let (g_grads, g_input_grad) = potentials
        .g_net
        .backward_from_cache(&g_input, &g_up, &g_cache)?;
    let (f_grads, _) = potentials
        .f_net
        .backward_from_cache(&f_input, &f_up, &f_cache)?;
    // potential path of the action gradient: g takes (s, a_i) directly
    for i in 0..b {
        let src = &g_input_grad.row(i)[obs..];
        let ag = action_grad.row_mut(i);
        for c in 0..act {
            ag[c] += src[c];
        }
    }
    Ok(DualOutcome {
        value,
        g_grads,
        f_grads,
        action_grad,
        clipped,
        terms: b * k,
        max_exponent,
    })
}

/// Deterministic train/holdout split of transition indices.
pub fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "bwd-holdout");
    indices.shuffle(&mut r);
    let n_holdout = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1)).max(1.min(n));
    let holdout = indices[..n_holdout].to_vec();
    let train = indices[n_holdout..].to_vec();
    (train, holdout)
}

/// Picks the automatic cost scale: `1 / max(1, median |c_raw|)` over a probe
/// of dataset pairs, where `c_raw = Q(s, a') - |a' - a|^2` with `a'` drawn
/// from the random reference policy. Probing the cost as actually used
/// matters: Q at off-support random actions can be an order of magnitude
/// larger than Q on data actions, and an under-scaled cost overflows the
/// dual's exponential term.
pub fn auto_cost_scale(
    critic: &Critic,
    dataset: &Dataset,
    random_policy: &RandomPolicy,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "bwd-cost-probe");
    let n = dataset.len().min(1000);
    let idx = dataset.sample_indices(n, &mut r)?;
    let mut abs_cost = Vec::with_capacity(n);
    for &i in &idx {
        let t = &dataset.transitions[i];
        let a2 = random_policy.sample(&mut r);
        abs_cost.push(bwd_cost(critic, 1.0, &t.state, &t.action, &a2)?.abs());
    }
    abs_cost.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = abs_cost[abs_cost.len() / 2];
    Ok(1.0 / median.max(1.0))
}

/// Trains the dual potentials by stochastic gradient ascent on the objective.
pub fn train_bwd(
    critic: &Critic,
    dataset: &Dataset,
    random_policy: &RandomPolicy,
    config: &BwdConfig,
    seed: u64,
) -> Result<(PotentialPair, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("cannot train potentials on an empty dataset".to_string()));
    }
    let cost_scale = match config.cost_scale {
        Some(s) => s,
        None => auto_cost_scale(critic, dataset, random_policy, seed)?,
    };
    let input_dim = dataset.obs_dim + dataset.act_dim;
    let mut potentials = PotentialPair {
        g_net: Network::new(input_dim, config.hidden_dim, 1, rng::child_seed(seed, "bwd-g"))?,
        f_net: Network::new(input_dim, config.hidden_dim, 1, rng::child_seed(seed, "bwd-f"))?,
        epsilon: config.epsilon,
        cost_scale,
    };
    let (train_idx, _) = holdout_split(dataset, config.holdout_fraction, seed);
    let mut g_optim = OptimState::new(&potentials.g_net, config.learning_rate);
    let mut f_optim = OptimState::new(&potentials.f_net, config.learning_rate);
    let mut batch_rng = rng::stream(seed, "bwd-batches");
    let mut trace = Vec::with_capacity(config.ot_steps);
    let mut clipped_total = 0usize;
    let mut terms_total = 0usize;

    for step in 0..config.ot_steps {
        let batch = DualBatch::sample(
            dataset,
            &train_idx,
            config.batch_size,
            config.k_negatives,
            random_policy,
            &mut batch_rng,
        )?;
        let mut outcome = dual_objective(&potentials, critic, &batch).map_err(|e| match e {
            Error::Numeric { msg, .. } => Error::Numeric { step, msg },
            other => other,
        })?;
        clipped_total += outcome.clipped;
        terms_total += outcome.terms;
        if clipped_total as f64 > MAX_CLIP_FRACTION * terms_total as f64 {
            return Err(Error::Numeric {
                step,
                msg: format!(
                    "exponent guard clipped {clipped_total}/{terms_total} terms (max exponent {:.2}); increase epsilon or reduce cost_scale",
                    outcome.max_exponent
                ),
            });
        }
        trace.push(outcome.value);
        // ascent: flip the sign and let the optimizer descend
        outcome.g_grads.scale(-1.0);
        outcome.f_grads.scale(-1.0);
        optim_step(&mut potentials.g_net, &outcome.g_grads, &mut g_optim)?;
        optim_step(&mut potentials.f_net, &outcome.f_grads, &mut f_optim)?;
    }
    Ok((potentials, trace))
}

/// Evaluates the trained dual objective on held-out minibatches.
pub fn estimate_bwd(
    potentials: &PotentialPair,
    critic: &Critic,
    dataset: &Dataset,
    random_policy: &RandomPolicy,
    config: &BwdConfig,
    seed: u64,
    config_hash: String,
) -> Result<BwdEstimate> {
    let (_, holdout_idx) = holdout_split(dataset, config.holdout_fraction, seed);
    if holdout_idx.is_empty() {
        return Err(Error::invalid_argument("empty holdout split".to_string()));
    }
    let mut eval_rng = rng::stream(seed, "bwd-eval");
    let mut values = Vec::with_capacity(config.eval_batches);
    for _ in 0..config.eval_batches {
        let batch = DualBatch::sample(
            dataset,
            &holdout_idx,
            config.batch_size,
            config.k_negatives,
            random_policy,
            &mut eval_rng,
        )?;
        values.push(dual_objective(potentials, critic, &batch)?.value);
    }
    let m = mean(&values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        / (values.len().saturating_sub(1).max(1)) as f64;
    let std_error = (var / values.len() as f64).sqrt();
    // A zero cost_scale (degenerate zero-cost instance) leaves the value in
    // scaled units rather than dividing by zero.
    let rescale = if potentials.cost_scale == 0.0 {
        1.0
    } else {
        potentials.cost_scale
    };
    Ok(BwdEstimate {
        value: m / rescale,
        std_error: std_error / rescale,
        value_scaled: m,
        epsilon: potentials.epsilon,
        cost_scale: potentials.cost_scale,
        config_hash,
    })
}

/// Result of the discrete log-domain Sinkhorn oracle.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    /// Entropic primal value `<plan, cost> + eps * KL(plan | mu x nu)`.
    pub primal_value: f64,
    pub plan: Mat,
    pub max_marginal_error: f64,
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn fixed-point iteration for the entropically regularized
/// discrete problem. Validation oracle for the learned dual.
pub fn sinkhorn_reference(
    cost: &Mat,
    mu: &[f64],
    nu: &[f64],
    epsilon: f64,
    iters: usize,
) -> Result<SinkhornSolution> {
    let (n, m) = (cost.rows, cost.cols);
    if mu.len() != n || nu.len() != m {
        return Err(Error::invalid_argument("marginal lengths must match the cost matrix".to_string()));
    }
    for (name, v) in [("mu", mu), ("nu", nu)] {
        if v.iter().any(|&p| p < 0.0) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_argument(format!("{name} is not a probability simplex")));
        }
    }
    if iters == 0 {
        return Err(Error::invalid_argument("iters must be >= 1".to_string()));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid_argument("epsilon must be positive".to_string()));
    }
    let log_mu: Vec<f64> = mu.iter().map(|&p| p.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|&p| p.ln()).collect();
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; m];
    let mut scratch = vec![0.0; n.max(m)];
    for _ in 0..iters {
        for i in 0..n {
            for j in 0..m {
                scratch[j] = log_nu[j] + (beta[j] - cost.row(i)[j]) / epsilon;
            }
            alpha[i] = -epsilon * log_sum_exp(&scratch[..m]);
        }
        for j in 0..m {
            for i in 0..n {
                scratch[i] = log_mu[i] + (alpha[i] - cost.row(i)[j]) / epsilon;
            }
            beta[j] = -epsilon * log_sum_exp(&scratch[..n]);
        }
    }
    let mut plan = Mat::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            plan.row_mut(i)[j] =
                mu[i] * nu[j] * ((alpha[i] + beta[j] - cost.row(i)[j]) / epsilon).exp();
        }
    }
    // primal value computed from the plan itself
    let mut transport = 0.0;
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = plan.row(i)[j];
            transport += p * cost.row(i)[j];
            if p > 0.0 {
                kl += p * (p / (mu[i] * nu[j])).ln();
            }
        }
    }
    let mut max_marginal_error: f64 = 0.0;
    for i in 0..n {
        let s: f64 = plan.row(i).iter().sum();
        max_marginal_error = max_marginal_error.max((s - mu[i]).abs());
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| plan.row(i)[j]).sum();
        max_marginal_error = max_marginal_error.max((s - nu[j]).abs());
    }
    Ok(SinkhornSolution {
        primal_value: transport + epsilon * kl,
        plan,
        max_marginal_error,
    })
}

/// Full-batch gradient ascent of the paper-form dual over per-atom potential
/// tables. An exact discrete special case of the neural training loop, used
/// to validate the dual machinery against [`sinkhorn_reference`].
/// Returns `(g, f, final objective value)`.
pub fn train_table_dual(
    cost: &Mat,
    mu: &[f64],
    nu: &[f64],
    epsilon: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (n, m) = (cost.rows, cost.cols);
    if mu.len() != n || nu.len() != m {
        return Err(Error::invalid_argument("marginal lengths must match the cost matrix".to_string()));
    }
    let mut g = vec![0.0; n];
    let mut f = vec![0.0; m];
    let mut adam_m = vec![0.0; n + m];
    let mut adam_v = vec![0.0; n + m];
    let (b1, b2, eps_opt): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut grad = vec![0.0; n + m];
    let mut value = 0.0;
    for step in 0..steps {
        // staged learning-rate decay for tight convergence
        let lr = match step * 4 / steps.max(1) {
            0 => 0.1,
            1 => 0.02,
            2 => 0.005,
            _ => 0.001,
        };
        value = 0.0;
        grad.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            value += mu[i] * g[i];
        }
        for j in 0..m {
            value += nu[j] * f[j];
        }
        for i in 0..n {
            for j in 0..m {
                let z = ((g[i] + f[j] - cost.row(i)[j]) / epsilon).min(MAX_EXPONENT);
                let e = mu[i] * nu[j] * z.exp();
                value -= epsilon * e;
                grad[i] -= e;
                grad[n + j] -= e;
            }
        }
        for i in 0..n {
            grad[i] += mu[i];
        }
        for j in 0..m {
            grad[n + j] += nu[j];
        }
        let t = (step + 1) as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for idx in 0..n + m {
            adam_m[idx] = b1 * adam_m[idx] + (1.0 - b1) * grad[idx];
            adam_v[idx] = b2 * adam_v[idx] + (1.0 - b2) * grad[idx] * grad[idx];
            let update = lr * (adam_m[idx] / bc1) / ((adam_v[idx] / bc2).sqrt() + eps_opt);
            if idx < n {
                g[idx] += update;
            } else {
                f[idx - n] += update;
            }
        }
    }
    Ok((g, f, value))
}
