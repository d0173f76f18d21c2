//! The `bwdtk` command line: generate graded datasets, score a dataset,
//! run the correlation suite, and train a desk-scale agent.
//!
//! All outputs are byte-reproducible for a fixed seed: no timestamps, fixed
//! field order, and a `config.json` next to every artifact recording the
//! resolved configuration and its SHA-256 hash.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bwd::{estimate_bwd, train_bwd, BwdConfig};
use crate::critic::{fit_value_head, train_critic, CriticConfig};
use crate::dataset::{self, Dataset, RandomPolicy};
use crate::envgen::{generate_level, Env, GridEnv, GridMDP, PointMassEnv, ReturnScale};
use crate::error::{Error, Result};
use crate::iql::{evaluate_agent, train_iql, IqlConfig, RegSetup};
use crate::metrics::{metric_report, DEFAULT_N_SAMPLES};
use crate::report::{run_suite, SuiteConfig};
use crate::rng;

#[derive(Debug, Parser)]
#[command(name = "bwdtk", version, about = "Offline-RL dataset quality estimation via the Bellman-Wasserstein distance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Base seed for every derived random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Optional JSON file with defaults for the tuning flags below;
    /// explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Discount factor override.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Entropic regularization weight.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Cost scaling; omit for the automatic probe-based choice.
    #[arg(long)]
    pub cost_scale: Option<f64>,
    /// Random actions per behavior sample in the dual.
    #[arg(long)]
    pub k_negatives: Option<usize>,
    /// Behavioral critic gradient steps.
    #[arg(long)]
    pub critic_steps: Option<usize>,
    /// Dual-potential ascent steps.
    #[arg(long)]
    pub ot_steps: Option<usize>,
    /// Minibatch size for every trained head.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cap on dataset transitions; a random subsample is used beyond it.
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Worker threads. Only 1 is supported; larger values are ignored with
    /// a warning.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate graded synthetic datasets as .bwds files.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Environment: "pointmass" or "grid".
        #[arg(long, default_value = "pointmass")]
        env: String,
        /// Comma-separated behavior quality levels in [0, 1].
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,1.0", value_delimiter = ',')]
        levels: Vec<f64>,
        /// Transitions per dataset.
        #[arg(long, default_value_t = 20_000)]
        transitions: usize,
        /// Behavior seeds mixed into each dataset.
        #[arg(long, default_value_t = 1)]
        n_seeds: usize,
    },
    /// Score one dataset: baseline metrics plus the BWD estimate.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// Input .bwds dataset.
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the metric-vs-oracle correlation suite on a synthetic benchmark.
    Correlate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "pointmass")]
        env: String,
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,1.0", value_delimiter = ',')]
        levels: Vec<f64>,
        #[arg(long, default_value_t = 20_000)]
        transitions: usize,
        /// Independent dataset seeds per level.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Training steps for the oracle policies.
        #[arg(long, default_value_t = 50_000)]
        oracle_steps: usize,
    },
    /// Train a desk-scale IQL agent on a dataset, optionally with the BWD
    /// actor regularizer, and report its normalized score.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: PathBuf,
        /// Environment used for evaluation (must match the dataset).
        #[arg(long, default_value = "pointmass")]
        env: String,
        #[arg(long, default_value_t = 50_000)]
        steps: usize,
        /// Enable the BWD actor regularizer.
        #[arg(long)]
        bwd: bool,
        /// Regularizer strength.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Evaluation episodes for the final score.
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
    },
}

/// The tuning knobs after merging the config file and explicit flags.
#[derive(Debug, Clone, Serialize, serde::Deserialize, Default)]
pub struct Resolved {
    pub seed: u64,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub cost_scale: Option<f64>,
    pub k_negatives: Option<usize>,
    pub critic_steps: Option<usize>,
    pub ot_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub subsample: Option<usize>,
}

impl Resolved {
    fn from_common(common: &CommonArgs) -> Result<Self> {
        let mut base = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str::<Resolved>(&text).map_err(|e| {
                    Error::invalid_argument(format!("bad config file {}: {e}", path.display()))
                })?
            }
            None => Resolved::default(),
        };
        base.seed = common.seed;
        macro_rules! take {
            ($field:ident) => {
                if common.$field.is_some() {
                    base.$field = common.$field;
                }
            };
        }
        take!(gamma);
        take!(epsilon);
        take!(cost_scale);
        take!(k_negatives);
        take!(critic_steps);
        take!(ot_steps);
        take!(batch_size);
        take!(subsample);
        if let Some(g) = base.gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::invalid_argument(format!("--gamma must be in [0, 1), got {g}")));
            }
        }
        if let Some(e) = base.epsilon {
            if e <= 0.0 {
                return Err(Error::invalid_argument(format!("--epsilon must be positive, got {e}")));
            }
        }
        Ok(base)
    }

    fn critic_config(&self) -> CriticConfig {
        let mut cfg = CriticConfig::default();
        if let Some(s) = self.critic_steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.discount = self.gamma;
        cfg
    }

    fn bwd_config(&self) -> BwdConfig {
        let mut cfg = BwdConfig::default();
        if let Some(s) = self.ot_steps {
            cfg.ot_steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(k) = self.k_negatives {
            cfg.k_negatives = k;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        cfg.cost_scale = self.cost_scale;
        cfg
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_config<T: Serialize>(out_dir: &Path, command: &str, resolved: &T) -> Result<String> {
    #[derive(Serialize)]
    struct ConfigFile<'a, T: Serialize> {
        command: &'a str,
        config: &'a T,
        config_sha256: String,
    }
    let body = serde_json::to_string_pretty(resolved)?;
    let hash = sha256_hex(body.as_bytes());
    let file = ConfigFile {
        command,
        config: resolved,
        config_sha256: hash.clone(),
    };
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(hash)
}

fn make_env(name: &str, seed: u64) -> Result<Box<dyn Env>> {
    match name {
        "pointmass" => Ok(Box::new(PointMassEnv::new(2))),
        "grid" => Ok(Box::new(GridEnv::new(GridMDP::random(
            16,
            4,
            0.95,
            rng::child_seed(seed, "cli-grid"),
        )))),
        other => Err(Error::invalid_argument(format!(
            "unknown environment {other:?}; expected \"pointmass\" or \"grid\""
        ))),
    }
}

fn prepare_out(common: &CommonArgs) -> Result<()> {
    if common.workers > 1 {
        eprintln!("warning: --workers {} requested; running single-threaded", common.workers);
    }
    fs::create_dir_all(&common.out)?;
    Ok(())
}

fn load_dataset(path: &Path, resolved: &Resolved) -> Result<Dataset> {
    let mut ds = dataset::load(path)?;
    if let Some(g) = resolved.gamma {
        ds.discount = g;
    }
    if let Some(cap) = resolved.subsample {
        ds.subsample(cap, rng::child_seed(resolved.seed, "cli-subsample"))?;
    }
    Ok(ds)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, env, levels, transitions, n_seeds } => {
            prepare_out(&common)?;
            let resolved = Resolved::from_common(&common)?;
            for &level in &levels {
                if !(0.0..=1.0).contains(&level) {
                    return Err(Error::invalid_argument(format!("--levels entries must be in [0, 1], got {level}")));
                }
            }
            if transitions == 0 || n_seeds == 0 {
                return Err(Error::invalid_argument("--transitions and --n-seeds must be positive".to_string()));
            }
            let env_box = make_env(&env, common.seed)?;
            #[derive(Serialize)]
            struct GenConfig<'a> {
                env: &'a str,
                levels: &'a [f64],
                transitions: usize,
                n_seeds: usize,
                resolved: &'a Resolved,
            }
            write_config(&common.out, "generate", &GenConfig {
                env: &env,
                levels: &levels,
                transitions,
                n_seeds,
                resolved: &resolved,
            })?;
            for &level in &levels {
                let seed = rng::child_seed(common.seed, &format!("generate-{level}"));
                let mut ds = generate_level(env_box.as_ref(), level, transitions, n_seeds, seed)?;
                if let Some(g) = resolved.gamma {
                    ds.discount = g;
                }
                let path = common.out.join(format!("{}_q{:03}.bwds", env, (level * 100.0).round() as u32));
                dataset::save(&ds, &path)?;
                println!("wrote {} ({} transitions)", path.display(), ds.len());
            }
            Ok(())
        }
        Command::Score { common, input } => {
            prepare_out(&common)?;
            let resolved = Resolved::from_common(&common)?;
            let hash = write_config(&common.out, "score", &resolved)?;
            let ds = load_dataset(&input, &resolved)?;
            let critic_cfg = resolved.critic_config();
            let bwd_cfg = resolved.bwd_config();
            let (critic, _) = train_critic(&ds, &critic_cfg, rng::child_seed(common.seed, "score-critic"))?;
            let head = fit_value_head(
                &critic,
                &ds,
                critic_cfg.steps,
                critic_cfg.batch_size,
                rng::child_seed(common.seed, "score-value"),
            )?;
            let policy = RandomPolicy::new(ds.act_dim);
            let metrics = metric_report(
                &critic,
                &head,
                &ds,
                &policy,
                DEFAULT_N_SAMPLES.min(ds.len()),
                bwd_cfg.k_negatives,
                rng::child_seed(common.seed, "score-metrics"),
                hash.clone(),
            )?;
            let bwd_seed = rng::child_seed(common.seed, "score-bwd");
            let (potentials, _) = train_bwd(&critic, &ds, &policy, &bwd_cfg, bwd_seed)?;
            let estimate = estimate_bwd(&potentials, &critic, &ds, &policy, &bwd_cfg, bwd_seed, hash)?;
            #[derive(Serialize)]
            struct ScoreFile {
                input: String,
                n_transitions: usize,
                metrics: crate::metrics::MetricReport,
                bwd: crate::bwd::BwdEstimate,
            }
            let file = ScoreFile {
                input: input.display().to_string(),
                n_transitions: ds.len(),
                metrics,
                bwd: estimate,
            };
            let json = serde_json::to_string_pretty(&file)? + "\n";
            fs::write(common.out.join("score.json"), &json)?;
            println!("{json}");
            Ok(())
        }
        Command::Correlate { common, env, levels, transitions, seeds, oracle_steps } => {
            prepare_out(&common)?;
            let resolved = Resolved::from_common(&common)?;
            let env_box = make_env(&env, common.seed)?;
            let mut suite = SuiteConfig {
                quality_levels: levels.clone(),
                n_transitions: transitions,
                n_seeds: seeds,
                critic: resolved.critic_config(),
                bwd: resolved.bwd_config(),
                ..SuiteConfig::default()
            };
            suite.oracle_iql.steps = oracle_steps;
            if let Some(b) = resolved.batch_size {
                suite.oracle_iql.batch_size = b;
            }
            suite.oracle_iql.discount = resolved.gamma;
            #[derive(Serialize)]
            struct CorrConfig<'a> {
                env: &'a str,
                suite: &'a SuiteConfig,
                resolved: &'a Resolved,
            }
            write_config(&common.out, "correlate", &CorrConfig {
                env: &env,
                suite: &suite,
                resolved: &resolved,
            })?;
            let report = run_suite(env_box.as_ref(), &suite, common.seed)?;
            fs::write(common.out.join("report.csv"), report.to_csv())?;
            fs::write(common.out.join("report.json"), report.to_json()? + "\n")?;
            for (name, corr) in &report.correlations {
                println!("{name}: pearson {:.4}, spearman {:.4}", corr.pearson, corr.spearman);
            }
            Ok(())
        }
        Command::Train { common, input, env, steps, bwd, lambda, eval_episodes } => {
            prepare_out(&common)?;
            let resolved = Resolved::from_common(&common)?;
            let env_box = make_env(&env, common.seed)?;
            let ds = load_dataset(&input, &resolved)?;
            let mut iql_cfg = IqlConfig {
                steps,
                discount: resolved.gamma,
                ..IqlConfig::default()
            };
            if let Some(b) = resolved.batch_size {
                iql_cfg.batch_size = b;
            }
            #[derive(Serialize)]
            struct TrainConfig<'a> {
                env: &'a str,
                steps: usize,
                bwd: bool,
                lambda: f64,
                iql: &'a IqlConfig,
                resolved: &'a Resolved,
            }
            write_config(&common.out, "train", &TrainConfig {
                env: &env,
                steps,
                bwd,
                lambda,
                iql: &iql_cfg,
                resolved: &resolved,
            })?;
            let reg = if bwd {
                let critic_cfg = resolved.critic_config();
                let bwd_cfg = resolved.bwd_config();
                let (critic, _) = train_critic(&ds, &critic_cfg, rng::child_seed(common.seed, "train-critic"))?;
                let policy = RandomPolicy::new(ds.act_dim);
                let bwd_seed = rng::child_seed(common.seed, "train-bwd");
                let (potentials, _) = train_bwd(&critic, &ds, &policy, &bwd_cfg, bwd_seed)?;
                Some(RegSetup {
                    critic,
                    potentials,
                    random_policy: policy,
                    lambda,
                    k_negatives: bwd_cfg.k_negatives,
                    potential_lr: bwd_cfg.learning_rate,
                })
            } else {
                None
            };
            let (agent, trace) = train_iql(&ds, &iql_cfg, reg, rng::child_seed(common.seed, "train-iql"))?;
            let scale = ReturnScale::measure(env_box.as_ref(), eval_episodes.max(20), rng::child_seed(common.seed, "train-scale"));
            let raw_return = evaluate_agent(env_box.as_ref(), &agent, eval_episodes, rng::child_seed(common.seed, "train-eval"))?;
            #[derive(Serialize)]
            struct TrainFile {
                input: String,
                bwd_regularized: bool,
                lambda: f64,
                steps: usize,
                final_td_loss: f64,
                raw_return: f64,
                normalized_score: f64,
            }
            let tail = trace.len().min(100);
            let file = TrainFile {
                input: input.display().to_string(),
                bwd_regularized: bwd,
                lambda,
                steps,
                final_td_loss: trace[trace.len() - tail..].iter().sum::<f64>() / tail as f64,
                raw_return,
                normalized_score: scale.normalize(raw_return),
            };
            let json = serde_json::to_string_pretty(&file)? + "\n";
            fs::write(common.out.join("train.json"), &json)?;
            // evaluation curve: every-100th TD loss plus the final score, in
            // a file whose bytes depend only on the training trajectory
            #[derive(Serialize)]
            struct CurveFile {
                td_loss_every_100: Vec<f64>,
                raw_return: f64,
                normalized_score: f64,
            }
            let curve = CurveFile {
                td_loss_every_100: trace.iter().step_by(100).copied().collect(),
                raw_return,
                normalized_score: file.normalized_score,
            };
            fs::write(common.out.join("curve.json"), serde_json::to_string_pretty(&curve)? + "\n")?;
            println!("{json}");
            Ok(())
        }
    }
}

/// Maps an error to the documented process exit code: 2 for usage errors,
/// 3 for file-format errors, 4 for numeric failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Format { .. } => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}
