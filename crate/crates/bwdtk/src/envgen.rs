//! Desk-scale ground truth: a continuous point-mass control task, a small
//! tabular MDP with exact policy-evaluation oracles, scripted behavior
//! policies at graded quality levels, and dataset generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, RandomPolicy, Transition};
use crate::error::{Error, Result};
use crate::linalg::{solve_linear, Mat};
use crate::rng;

/// A stateless environment description; episode state lives in the rollout.
pub trait Env: Sync {
    fn name(&self) -> &str;
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn discount(&self) -> f64;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Returns `(next_state, reward, terminal)`.
    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool);
    /// Analytic (or precomputed) expert action for this state.
    fn expert_action(&self, state: &[f64]) -> Vec<f64>;
}

/// Point-mass navigation: `s' = clip(s + action_scale * a + noise)`,
/// per-step reward `-|s - goal|`.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub dims: usize,
    pub goal: Vec<f64>,
    pub max_steps: usize,
    pub action_scale: f64,
    pub noise_std: f64,
    pub state_bound: f64,
    pub expert_gain: f64,
    pub discount: f64,
    name: String,
}

impl PointMassEnv {
    pub fn new(dims: usize) -> Self {
        PointMassEnv {
            dims,
            goal: vec![0.6; dims],
            max_steps: 50,
            action_scale: 0.1,
            noise_std: 0.01,
            state_bound: 1.5,
            expert_gain: 4.0,
            discount: 0.99,
            name: format!("pointmass{dims}"),
        }
    }
}

impl Env for PointMassEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn obs_dim(&self) -> usize {
        self.dims
    }

    fn act_dim(&self) -> usize {
        self.dims
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dims).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let mut next = Vec::with_capacity(self.dims);
        for i in 0..self.dims {
            let noise = if self.noise_std > 0.0 {
                Normal::new(0.0, self.noise_std).unwrap().sample(rng)
            } else {
                0.0
            };
            let v = state[i] + self.action_scale * action[i].clamp(-1.0, 1.0) + noise;
            next.push(v.clamp(-self.state_bound, self.state_bound));
        }
        let dist: f64 = state
            .iter()
            .zip(&self.goal)
            .map(|(s, g)| (s - g) * (s - g))
            .sum::<f64>()
            .sqrt();
        (next, -dist, false)
    }

    fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(&self.goal)
            .map(|(s, g)| (self.expert_gain * (g - s)).clamp(-1.0, 1.0))
            .collect()
    }
}

/// Small tabular MDP; rows of `transition_table` are probability simplexes.
#[derive(Debug, Clone)]
pub struct GridMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// [state][action] -> distribution over next states
    pub transition_table: Vec<Vec<Vec<f64>>>,
    /// [state][action]
    pub reward_table: Vec<Vec<f64>>,
    pub discount: f64,
}

impl GridMDP {
    pub fn random(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "grid-mdp");
        let mut transition_table = Vec::with_capacity(n_states);
        let mut reward_table = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            let mut rows = Vec::with_capacity(n_actions);
            let mut rewards = Vec::with_capacity(n_actions);
            for _ in 0..n_actions {
                let raw: Vec<f64> = (0..n_states).map(|_| r.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                rows.push(raw.into_iter().map(|v| v / sum).collect());
                rewards.push(r.gen_range(0.0..1.0));
            }
            transition_table.push(rows);
            reward_table.push(rewards);
        }
        GridMDP {
            n_states,
            n_actions,
            transition_table,
            reward_table,
            discount,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let sum: f64 = self.transition_table[s][a].iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid_argument(format!(
                        "transition row ({s},{a}) sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Optimal Q via value iteration; used for the tabular expert policy.
    pub fn optimal_q(&self, iters: usize) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; self.n_actions]; self.n_states];
        for _ in 0..iters {
            let mut next = vec![vec![0.0; self.n_actions]; self.n_states];
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let mut v = self.reward_table[s][a];
                    for (sp, &p) in self.transition_table[s][a].iter().enumerate() {
                        let best = q[sp]
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        v += self.discount * p * best;
                    }
                    next[s][a] = v;
                }
            }
            q = next;
        }
        q
    }
}

/// Solves `Q = r + gamma * P * Pi_beta * Q` by direct linear solve; the exact
/// oracle against which the SARSA critic is validated.
pub fn exact_q_beta(mdp: &GridMDP, behavior: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    if behavior.len() != mdp.n_states {
        return Err(Error::invalid_argument("behavior table has wrong state count".to_string()));
    }
    for row in behavior {
        let sum: f64 = row.iter().sum();
        if row.len() != mdp.n_actions || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_argument("behavior rows must sum to 1".to_string()));
        }
    }
    if mdp.discount >= 1.0 {
        return Err(Error::invalid_argument("discount must be < 1".to_string()));
    }
    let n = mdp.n_states * mdp.n_actions;
    let idx = |s: usize, a: usize| s * mdp.n_actions + a;
    let mut a_mat = Mat::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = idx(s, a);
            a_mat.row_mut(row)[row] += 1.0;
            rhs[row] = mdp.reward_table[s][a];
            for (sp, &p) in mdp.transition_table[s][a].iter().enumerate() {
                for ap in 0..mdp.n_actions {
                    a_mat.row_mut(row)[idx(sp, ap)] -= mdp.discount * p * behavior[sp][ap];
                }
            }
        }
    }
    let q_flat = solve_linear(&a_mat, &rhs)?;
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            q[s][a] = q_flat[idx(s, a)];
        }
    }
    // Bellman residual check
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut target = mdp.reward_table[s][a];
            for (sp, &p) in mdp.transition_table[s][a].iter().enumerate() {
                for ap in 0..mdp.n_actions {
                    target += mdp.discount * p * behavior[sp][ap] * q[sp][ap];
                }
            }
            debug_assert!((q[s][a] - target).abs() <= 1e-10);
        }
    }
    Ok(q)
}

/// One-hot embedding of a [`GridMDP`] behind the continuous [`Env`] interface.
/// States are one-hot vectors; actions decode by argmax coordinate.
pub struct GridEnv {
    pub mdp: GridMDP,
    optimal_q: Vec<Vec<f64>>,
    name: String,
    pub max_steps: usize,
}

impl GridEnv {
    pub fn new(mdp: GridMDP) -> Self {
        let optimal_q = mdp.optimal_q(2000);
        GridEnv {
            optimal_q,
            mdp,
            name: "gridmdp".to_string(),
            max_steps: 50,
        }
    }

    pub fn decode_state(&self, obs: &[f64]) -> usize {
        argmax(obs)
    }

    pub fn decode_action(&self, action: &[f64]) -> usize {
        argmax(action)
    }

    pub fn one_hot(dim: usize, idx: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[idx] = 1.0;
        v
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Env for GridEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn obs_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn act_dim(&self) -> usize {
        self.mdp.n_actions
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn discount(&self) -> f64 {
        self.mdp.discount
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        GridEnv::one_hot(self.mdp.n_states, rng.gen_range(0..self.mdp.n_states))
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, bool) {
        let s = self.decode_state(state);
        let a = self.decode_action(action);
        let probs = &self.mdp.transition_table[s][a];
        let mut u: f64 = rng.gen_range(0.0..1.0);
        let mut sp = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            if u < p {
                sp = i;
                break;
            }
            u -= p;
        }
        (
            GridEnv::one_hot(self.mdp.n_states, sp),
            self.mdp.reward_table[s][a],
            false,
        )
    }

    fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        let s = self.decode_state(state);
        GridEnv::one_hot(self.mdp.n_actions, argmax(&self.optimal_q[s]))
    }
}

/// Behavior at a graded quality level: with probability `quality` the expert
/// action plus Gaussian noise, otherwise a draw from the random policy.
pub struct GradedPolicy {
    pub quality: f64,
    pub exploration_std: f64,
    pub random: RandomPolicy,
}

impl GradedPolicy {
    pub fn new(quality: f64, act_dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::invalid_argument(format!(
                "quality must be in [0,1], got {quality}"
            )));
        }
        Ok(GradedPolicy {
            quality,
            exploration_std: 0.1,
            random: RandomPolicy::new(act_dim),
        })
    }

    pub fn act(&self, env: &dyn Env, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        if rng.gen_range(0.0..1.0) < self.quality {
            let normal = Normal::new(0.0, self.exploration_std).unwrap();
            env.expert_action(state)
                .into_iter()
                .map(|a| (a + normal.sample(rng)).clamp(-1.0, 1.0))
                .collect()
        } else {
            self.random.sample(rng)
        }
    }
}

/// Runs one episode of at most `n_steps` steps; returns the transitions and
/// the undiscounted episode return.
pub fn rollout(
    env: &dyn Env,
    policy: &mut dyn FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Transition>, f64) {
    let mut state = env.reset(rng);
    let mut transitions = Vec::with_capacity(n_steps);
    let mut ret = 0.0;
    for _ in 0..n_steps {
        let action = policy(&state, rng);
        let (next_state, reward, terminal) = env.step(&state, &action, rng);
        ret += reward;
        transitions.push(Transition {
            state: state.clone(),
            action,
            reward,
            next_state: next_state.clone(),
            next_action: None,
            terminal,
        });
        state = next_state;
        if terminal {
            break;
        }
    }
    (transitions, ret)
}

/// Mean undiscounted return of a policy over `episodes` episodes.
pub fn mean_return(
    env: &dyn Env,
    policy: &mut dyn FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let (_, ret) = rollout(env, policy, env.max_steps(), rng);
        total += ret;
    }
    total / episodes as f64
}

/// One dataset per quality level, each mixing `n_seeds` independent policy
/// instantiations equally; next actions are filled and meta records provenance.
pub fn generate_dataset(
    env: &dyn Env,
    quality_levels: &[f64],
    n_transitions_per_level: usize,
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<Dataset>> {
    let mut out = Vec::with_capacity(quality_levels.len());
    for &level in quality_levels {
        out.push(generate_level(
            env,
            level,
            n_transitions_per_level,
            n_seeds,
            base_seed,
        )?);
    }
    Ok(out)
}

pub fn generate_level(
    env: &dyn Env,
    level: f64,
    n_transitions: usize,
    n_seeds: usize,
    base_seed: u64,
) -> Result<Dataset> {
    let policy = GradedPolicy::new(level, env.act_dim())?;
    let mut ds = Dataset::new(env.obs_dim(), env.act_dim(), env.discount())?;
    let per_seed = n_transitions.div_ceil(n_seeds.max(1));
    'outer: for seed_idx in 0..n_seeds.max(1) {
        let run_seed = rng::child_seed(base_seed, &format!("gen-{}-{level}-{seed_idx}", env.name()));
        let mut r = rng::stream(run_seed, "rollout");
        let mut collected = 0usize;
        while collected < per_seed {
            let (traj, _) = rollout(
                env,
                &mut |s, rr| policy.act(env, s, rr),
                env.max_steps(),
                &mut r,
            );
            let start = ds.transitions.len();
            for t in traj {
                if ds.transitions.len() >= n_transitions {
                    break;
                }
                ds.transitions.push(t);
                collected += 1;
            }
            let end = ds.transitions.len();
            if end > start {
                ds.trajectory_bounds.push((start, end));
            }
            if ds.transitions.len() >= n_transitions {
                if seed_idx + 1 == n_seeds.max(1) || ds.transitions.len() >= n_transitions {
                    break 'outer;
                }
            }
        }
    }
    ds.fill_next_actions()?;
    ds.meta.insert("env".to_string(), env.name().to_string());
    ds.meta.insert("quality".to_string(), format!("{level}"));
    ds.meta.insert("seed".to_string(), format!("{base_seed}"));
    ds.meta.insert("n_seeds".to_string(), format!("{n_seeds}"));
    Ok(ds)
}

/// Measured random/expert returns used by the 0-100 normalized-score scale.
#[derive(Debug, Clone, Copy)]
pub struct ReturnScale {
    pub random_return: f64,
    pub expert_return: f64,
}

impl ReturnScale {
    pub fn measure(env: &dyn Env, episodes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "return-scale");
        let random = RandomPolicy::new(env.act_dim());
        let random_return = mean_return(env, &mut |_, rr| random.sample(rr), episodes, &mut r);
        let expert_return = mean_return(
            env,
            &mut |s, _| env.expert_action(s),
            episodes,
            &mut r,
        );
        ReturnScale {
            random_return,
            expert_return,
        }
    }

    pub fn normalize(&self, raw_return: f64) -> f64 {
        100.0 * (raw_return - self.random_return) / (self.expert_return - self.random_return)
    }
}
