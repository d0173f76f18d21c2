//! The correlation suite: run every quality metric across graded datasets,
//! score each dataset with a ground-truth oracle (behavior cloning plus
//! desk-scale IQL, normalized returns), and report how well each metric
//! ranks datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bwd::{estimate_bwd, train_bwd, BwdConfig};
use crate::critic::{fit_value_head, train_critic, CriticConfig};
use crate::dataset::{Dataset, RandomPolicy};
use crate::envgen::{generate_level, Env, ReturnScale};
use crate::error::{Error, Result};
use crate::iql::{evaluate_agent, train_bc, train_iql, IqlConfig};
use crate::metrics::{metric_report, DEFAULT_N_SAMPLES};
use crate::rng;

/// Pearson product-moment correlation. Errors if either input has zero
/// variance, fewer than two points, or mismatched lengths.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid_argument("correlation inputs must have equal length".to_string()));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".to_string()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance input".to_string()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties assigned the average of the tied positions (1-based).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid_argument("correlation inputs must have equal length".to_string()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub quality_levels: Vec<f64>,
    pub n_transitions: usize,
    pub n_seeds: usize,
    pub critic: CriticConfig,
    pub bwd: BwdConfig,
    /// Training budget for the oracle policies (BC and IQL share it).
    pub oracle_iql: IqlConfig,
    pub oracle_episodes: usize,
    pub metric_samples: usize,
    pub metric_k_actions: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            quality_levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            n_transitions: 20_000,
            n_seeds: 3,
            critic: CriticConfig::default(),
            bwd: BwdConfig::default(),
            oracle_iql: IqlConfig::default(),
            oracle_episodes: 20,
            metric_samples: DEFAULT_N_SAMPLES,
            metric_k_actions: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRow {
    pub dataset: String,
    pub quality: f64,
    pub seed: u64,
    pub mean_reward: f64,
    pub mean_q: f64,
    pub mean_advantage: f64,
    pub pd_random: f64,
    pub bwd: f64,
    pub bwd_std_error: f64,
    pub oracle: f64,
    pub n_samples: usize,
    /// Present when the pipeline failed for this dataset; metric fields are
    /// NaN and the row is excluded from correlations.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub pearson: f64,
    pub spearman: f64,
    /// Number of per-seed correlations that were defined and averaged.
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    /// Seed-averaged correlation of each metric with the oracle score.
    pub correlations: BTreeMap<String, CorrelationPair>,
}

pub const METRIC_NAMES: [&str; 5] = ["mean_reward", "mean_q", "mean_advantage", "pd_random", "bwd"];

const CSV_COLUMNS: [&str; 12] = [
    "dataset",
    "quality",
    "seed",
    "mean_reward",
    "mean_q",
    "mean_advantage",
    "pd_random",
    "bwd",
    "bwd_std_error",
    "oracle",
    "n_samples",
    "failed",
];

fn metric_value(row: &SuiteRow, name: &str) -> f64 {
    match name {
        "mean_reward" => row.mean_reward,
        "mean_q" => row.mean_q,
        "mean_advantage" => row.mean_advantage,
        "pd_random" => row.pd_random,
        "bwd" => row.bwd,
        other => unreachable!("unknown metric {other}"),
    }
}

/// Ground-truth dataset quality: mean of the normalized scores of behavior
/// cloning and desk-scale IQL trained on the dataset.
pub fn oracle_score(
    env: &dyn Env,
    dataset: &Dataset,
    config: &IqlConfig,
    scale: &ReturnScale,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let bc = train_bc(dataset, config, rng::child_seed(seed, "oracle-bc"))?;
    let (iql, _) = train_iql(dataset, config, None, rng::child_seed(seed, "oracle-iql"))?;
    let bc_score = scale.normalize(evaluate_agent(env, &bc, episodes, rng::child_seed(seed, "oracle-bc-eval"))?);
    let iql_score = scale.normalize(evaluate_agent(env, &iql, episodes, rng::child_seed(seed, "oracle-iql-eval"))?);
    Ok(0.5 * (bc_score + iql_score))
}

fn run_one(
    env: &dyn Env,
    dataset: &Dataset,
    config: &SuiteConfig,
    scale: &ReturnScale,
    seed: u64,
) -> Result<(f64, f64, f64, f64, f64, f64, f64, usize)> {
    let (critic, _) = train_critic(dataset, &config.critic, rng::child_seed(seed, "suite-critic"))?;
    let head = fit_value_head(
        &critic,
        dataset,
        config.critic.steps,
        config.critic.batch_size,
        rng::child_seed(seed, "suite-value"),
    )?;
    let policy = RandomPolicy::new(dataset.act_dim);
    let metrics = metric_report(
        &critic,
        &head,
        dataset,
        &policy,
        config.metric_samples,
        config.metric_k_actions,
        rng::child_seed(seed, "suite-metrics"),
        String::new(),
    )?;
    let bwd_seed = rng::child_seed(seed, "suite-bwd");
    let (potentials, _) = train_bwd(&critic, dataset, &policy, &config.bwd, bwd_seed)?;
    let estimate = estimate_bwd(&potentials, &critic, dataset, &policy, &config.bwd, bwd_seed, String::new())?;
    let oracle = oracle_score(
        env,
        dataset,
        &config.oracle_iql,
        scale,
        config.oracle_episodes,
        rng::child_seed(seed, "suite-oracle"),
    )?;
    Ok((
        metrics.mean_reward,
        metrics.mean_q,
        metrics.mean_advantage,
        metrics.pd_random,
        estimate.value,
        estimate.std_error,
        oracle,
        metrics.n_samples,
    ))
}

/// Runs the full suite: for every quality level and seed, generate a graded
/// dataset, compute all metrics plus the oracle, then correlate.
pub fn run_suite(env: &dyn Env, config: &SuiteConfig, seed: u64) -> Result<SuiteReport> {
    if config.quality_levels.is_empty() || config.n_seeds == 0 {
        return Err(Error::invalid_argument("suite needs at least one quality level and one seed".to_string()));
    }
    let scale = ReturnScale::measure(env, config.oracle_episodes.max(20), rng::child_seed(seed, "suite-scale"));
    let mut rows = Vec::new();
    for seed_idx in 0..config.n_seeds {
        for &quality in &config.quality_levels {
            let row_seed = rng::child_seed(seed, &format!("suite-{seed_idx}-{quality}"));
            let dataset_name = format!("{}-q{:.2}-s{}", env.name(), quality, seed_idx);
            let result = generate_level(env, quality, config.n_transitions, 1, row_seed)
                .and_then(|ds| run_one(env, &ds, config, &scale, row_seed));
            let row = match result {
                Ok((mean_reward, mean_q, mean_advantage, pd_random, bwd, bwd_std_error, oracle, n_samples)) => SuiteRow {
                    dataset: dataset_name,
                    quality,
                    seed: seed_idx as u64,
                    mean_reward,
                    mean_q,
                    mean_advantage,
                    pd_random,
                    bwd,
                    bwd_std_error,
                    oracle,
                    n_samples,
                    failed: None,
                },
                Err(e) => SuiteRow {
                    dataset: dataset_name,
                    quality,
                    seed: seed_idx as u64,
                    mean_reward: f64::NAN,
                    mean_q: f64::NAN,
                    mean_advantage: f64::NAN,
                    pd_random: f64::NAN,
                    bwd: f64::NAN,
                    bwd_std_error: f64::NAN,
                    oracle: f64::NAN,
                    n_samples: 0,
                    failed: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    let correlations = correlate(&rows)?;
    Ok(SuiteReport { rows, correlations })
}

/// Per-seed correlations of each metric with the oracle, averaged over the
/// seeds for which they are defined.
pub fn correlate(rows: &[SuiteRow]) -> Result<BTreeMap<String, CorrelationPair>> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = BTreeMap::new();
    for name in METRIC_NAMES {
        let mut pearsons = Vec::new();
        let mut spearmans = Vec::new();
        for &s in &seeds {
            let valid: Vec<&SuiteRow> = rows
                .iter()
                .filter(|r| r.seed == s && r.failed.is_none())
                .collect();
            let xs: Vec<f64> = valid.iter().map(|r| metric_value(r, name)).collect();
            let ys: Vec<f64> = valid.iter().map(|r| r.oracle).collect();
            match (pearson(&xs, &ys), spearman(&xs, &ys)) {
                (Ok(p), Ok(r)) => {
                    pearsons.push(p);
                    spearmans.push(r);
                }
                _ => {} // undefined for this seed; skip it
            }
        }
        if pearsons.is_empty() {
            return Err(Error::UndefinedCorrelation(format!("no seed yields a defined correlation for {name}")));
        }
        out.insert(
            name.to_string(),
            CorrelationPair {
                pearson: pearsons.iter().sum::<f64>() / pearsons.len() as f64,
                spearman: spearmans.iter().sum::<f64>() / spearmans.len() as f64,
                n_seeds: pearsons.len(),
            },
        );
    }
    Ok(out)
}

impl SuiteReport {
    /// Fixed-column CSV with one row per dataset. Floats are rendered with
    /// `{:.*e}` so the file is byte-stable across runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for row in &self.rows {
            let fields = [
                row.dataset.clone(),
                format!("{:.17e}", row.quality),
                row.seed.to_string(),
                format!("{:.17e}", row.mean_reward),
                format!("{:.17e}", row.mean_q),
                format!("{:.17e}", row.mean_advantage),
                format!("{:.17e}", row.pd_random),
                format!("{:.17e}", row.bwd),
                format!("{:.17e}", row.bwd_std_error),
                format!("{:.17e}", row.oracle),
                row.n_samples.to_string(),
                row.failed.clone().unwrap_or_default().replace(',', ";"),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
