//! Offline-experience data model, the `BWDS` binary file format, a JSON-lines
//! interchange format, and the two empirical sampling distributions used by
//! the metrics: dataset state-action pairs and state-random-action pairs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit of offline experience. `next_action` is the SARSA linkage: the
/// action actually taken at `next_state` within the same trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_action: Option<Vec<f64>>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub discount: f64,
    pub transitions: Vec<Transition>,
    /// Half-open index ranges partitioning `transitions` into trajectories.
    pub trajectory_bounds: Vec<(usize, usize)>,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(obs_dim: usize, act_dim: usize, discount: f64) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::invalid_argument("dims must be >= 1".to_string()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid_argument(format!(
                "discount must be in (0,1), got {discount}"
            )));
        }
        Ok(Dataset {
            obs_dim,
            act_dim,
            discount,
            transitions: Vec::new(),
            trajectory_bounds: Vec::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn check_bounds(&self) -> Result<()> {
        let mut expected_start = 0usize;
        for &(start, end) in &self.trajectory_bounds {
            if start != expected_start || end <= start {
                return Err(Error::invalid_argument(format!(
                    "trajectory bounds must partition the transition list; bad range {start}..{end}"
                )));
            }
            expected_start = end;
        }
        if expected_start != self.transitions.len() {
            return Err(Error::invalid_argument(
                "trajectory bounds do not cover the transition list".to_string(),
            ));
        }
        Ok(())
    }

    /// Rewrites each transition's `next_action` as the following transition's
    /// action within the same trajectory; the last transition of every
    /// trajectory gets `None`. Idempotent.
    pub fn fill_next_actions(&mut self) -> Result<()> {
        self.check_bounds()?;
        for &(start, end) in &self.trajectory_bounds.clone() {
            for i in start..end {
                self.transitions[i].next_action = if i + 1 < end {
                    Some(self.transitions[i + 1].action.clone())
                } else {
                    None
                };
            }
        }
        Ok(())
    }

    /// Uniform with replacement; deterministic given the rng state.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::invalid_argument("cannot sample from an empty dataset".to_string()));
        }
        Ok((0..batch_size)
            .map(|_| rng.gen_range(0..self.transitions.len()))
            .collect())
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.transitions[i])
            .collect())
    }

    /// Draws a state uniformly from the dataset and a fresh action from the
    /// random reference policy.
    pub fn sample_random_pair<'a>(
        &'a self,
        policy: &RandomPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<(&'a [f64], Vec<f64>)> {
        if self.is_empty() {
            return Err(Error::invalid_argument("cannot sample from an empty dataset".to_string()));
        }
        let idx = rng.gen_range(0..self.transitions.len());
        let action = policy.sample(rng);
        Ok((&self.transitions[idx].state, action))
    }

    pub fn mean_reward_full(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.transitions.iter().map(|t| t.reward).sum::<f64>() / self.len() as f64
    }

    /// Keeps a uniform random subsample of at most `cap` transitions,
    /// preserving the original ordering of the kept transitions. Trajectory
    /// bounds no longer describe contiguous episodes afterwards, so they are
    /// collapsed to a single span.
    pub fn subsample(&mut self, cap: usize, seed: u64) -> Result<()> {
        if cap == 0 {
            return Err(Error::invalid_argument("subsample cap must be positive".to_string()));
        }
        if cap >= self.len() {
            return Ok(());
        }
        use rand::seq::SliceRandom;
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut r = crate::rng::stream(seed, "dataset-subsample");
        indices.shuffle(&mut r);
        indices.truncate(cap);
        indices.sort_unstable();
        self.transitions = indices
            .iter()
            .map(|&i| self.transitions[i].clone())
            .collect();
        self.trajectory_bounds = vec![(0, self.transitions.len())];
        Ok(())
    }
}

/// The random reference policy: a coordinatewise clipped normal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomPolicy {
    pub act_dim: usize,
    pub std: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub seed: u64,
}

impl RandomPolicy {
    pub fn new(act_dim: usize) -> Self {
        RandomPolicy {
            act_dim,
            std: 1.0,
            clip_low: -1.0,
            clip_high: 1.0,
            seed: 0,
        }
    }

    pub fn with_std(act_dim: usize, std: f64) -> Self {
        RandomPolicy {
            std,
            ..RandomPolicy::new(act_dim)
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.std == 0.0 {
            return vec![0.0f64.clamp(self.clip_low, self.clip_high); self.act_dim];
        }
        let normal = Normal::new(0.0, self.std).expect("std must be finite and positive");
        (0..self.act_dim)
            .map(|_| normal.sample(rng).clamp(self.clip_low, self.clip_high))
            .collect()
    }
}

const DATASET_MAGIC: &[u8; 4] = b"BWDS";
const DATASET_VERSION: u32 = 1;

/// Serializes the dataset to the `BWDS` little-endian binary layout.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    ds.check_bounds()?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.obs_dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.act_dim as u32).to_le_bytes());
    out.extend_from_slice(&ds.discount.to_le_bytes());
    out.extend_from_slice(&(ds.transitions.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.trajectory_bounds.len() as u64).to_le_bytes());
    for &(start, _) in &ds.trajectory_bounds {
        out.extend_from_slice(&(start as u64).to_le_bytes());
    }
    for t in &ds.transitions {
        if t.state.len() != ds.obs_dim
            || t.action.len() != ds.act_dim
            || t.next_state.len() != ds.obs_dim
        {
            return Err(Error::invalid_argument(
                "transition dims do not match dataset header".to_string(),
            ));
        }
        for v in &t.state {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &t.action {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&t.reward.to_le_bytes());
        for v in &t.next_state {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(t.terminal as u8);
        match &t.next_action {
            Some(a) => {
                if a.len() != ds.act_dim {
                    return Err(Error::invalid_argument(
                        "next_action dim does not match dataset header".to_string(),
                    ));
                }
                out.push(1);
                for v in a {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected BWDS"));
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let obs_dim = cur.u32("obs_dim")? as usize;
    let act_dim = cur.u32("act_dim")? as usize;
    if obs_dim == 0 || act_dim == 0 {
        return Err(Error::format(8, "zero dimension in header"));
    }
    let discount = cur.f64("discount")?;
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::format(16, format!("discount {discount} outside (0,1)")));
    }
    let n_transitions = cur.u64("n_transitions")? as usize;
    let n_trajectories = cur.u64("n_trajectories")? as usize;
    let mut starts = Vec::with_capacity(n_trajectories);
    for _ in 0..n_trajectories {
        starts.push(cur.u64("trajectory start")? as usize);
    }
    let mut transitions = Vec::with_capacity(n_transitions);
    for _ in 0..n_transitions {
        let state = cur.f64_vec(obs_dim, "state")?;
        let action = cur.f64_vec(act_dim, "action")?;
        let action_offset = cur.pos - 8 * act_dim;
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::format(
                action_offset as u64,
                "action coordinate outside [-1, 1]",
            ));
        }
        let reward = cur.f64("reward")?;
        let next_state = cur.f64_vec(obs_dim, "next_state")?;
        let terminal = cur.u8("terminal flag")? != 0;
        let has_next = cur.u8("next_action flag")?;
        let next_action = match has_next {
            0 => None,
            1 => Some(cur.f64_vec(act_dim, "next_action")?),
            v => {
                return Err(Error::format(
                    (cur.pos - 1) as u64,
                    format!("invalid next_action flag {v}"),
                ));
            }
        };
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            next_action,
            terminal,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            "trailing bytes after last transition",
        ));
    }
    let mut bounds = Vec::with_capacity(n_trajectories);
    for (i, &start) in starts.iter().enumerate() {
        let end = if i + 1 < starts.len() {
            starts[i + 1]
        } else {
            n_transitions
        };
        bounds.push((start, end));
    }
    let ds = Dataset {
        obs_dim,
        act_dim,
        discount,
        transitions,
        trajectory_bounds: bounds,
        meta: BTreeMap::new(),
    };
    ds.check_bounds()
        .map_err(|e| Error::format(0, format!("inconsistent trajectory bounds: {e}")))?;
    Ok(ds)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = to_bytes(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    obs_dim: usize,
    act_dim: usize,
    discount: f64,
    trajectory_starts: Vec<usize>,
    meta: BTreeMap<String, String>,
}

/// JSON-lines interchange: a header object on the first line, then one
/// transition object per line.
pub fn export_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    ds.check_bounds()?;
    let mut out = String::new();
    let header = JsonlHeader {
        obs_dim: ds.obs_dim,
        act_dim: ds.act_dim,
        discount: ds.discount,
        trajectory_starts: ds.trajectory_bounds.iter().map(|&(s, _)| s).collect(),
        meta: ds.meta.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serialization"));
    out.push('\n');
    for t in &ds.transitions {
        out.push_str(&serde_json::to_string(t).expect("transition serialization"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn import_jsonl(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(0, "empty jsonl file"))?;
    let header: JsonlHeader = serde_json::from_str(header_line)
        .map_err(|e| Error::format(0, format!("bad jsonl header: {e}")))?;
    let mut ds = Dataset::new(header.obs_dim, header.act_dim, header.discount)?;
    ds.meta = header.meta;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Transition = serde_json::from_str(line)
            .map_err(|e| Error::format(lineno as u64 + 1, format!("bad transition line: {e}")))?;
        ds.transitions.push(t);
    }
    let n = ds.transitions.len();
    let starts = header.trajectory_starts;
    for (i, &start) in starts.iter().enumerate() {
        let end = if i + 1 < starts.len() { starts[i + 1] } else { n };
        ds.trajectory_bounds.push((start, end));
    }
    ds.check_bounds()?;
    Ok(ds)
}
