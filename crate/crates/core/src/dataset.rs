//! Trajectory storage, normalization, training-batch slicing and the
//! `MPDTRAJ1` binary format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::TrainBatch;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MPDTRAJ1";
pub const STD_FLOOR: f64 = 1e-6;

/// One recorded episode.
///
/// `states` holds `T + 1` rows, `actions`/`rewards`/`costs` hold `T` rows.
/// `goal` is the task tag (final state or goal position).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state_dim: usize,
    pub action_dim: usize,
    pub cost_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub goal: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn cost(&self, t: usize) -> &[f64] {
        &self.costs[t * self.cost_dim..(t + 1) * self.cost_dim]
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn return_to_go(&self, t: usize) -> f64 {
        self.rewards[t..].iter().sum()
    }

    pub fn cost_to_go(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cost_dim];
        for s in t..self.steps() {
            for (o, c) in out.iter_mut().zip(self.cost(s)) {
                *o += c;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.steps();
        let ok = self.states.len() == (t + 1) * self.state_dim
            && self.actions.len() == t * self.action_dim
            && self.costs.len() == t * self.cost_dim;
        if !ok {
            return Err(Error::Format(format!(
                "inconsistent trajectory lengths: {} states, {} actions, {} rewards, {} costs",
                self.states.len(),
                self.actions.len(),
                t,
                self.costs.len()
            )));
        }
        let finite = [&self.states, &self.actions, &self.rewards, &self.costs, &self.goal]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Numerical("non-finite trajectory entry".into()));
        }
        Ok(())
    }

    fn quantized(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>();
        Self {
            states: q(&self.states),
            actions: q(&self.actions),
            rewards: q(&self.rewards),
            costs: q(&self.costs),
            goal: q(&self.goal),
            ..*self
        }
    }
}

/// What the task vector `y` is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTarget {
    /// The episode's goal tag, normalized with the matching leading state dimensions.
    Goal,
    /// Normalized return-to-go followed by normalized cost-to-go per cost dimension.
    ReturnCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub env_hash: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub cost_dim: usize,
    pub goal_dim: usize,
    pub target: TaskTarget,
    /// Free-form generator notes (reference-path family, bounds, ...).
    #[serde(default)]
    pub notes: Vec<(String, String)>,
}

impl DatasetMeta {
    pub fn y_dim(&self) -> usize {
        match self.target {
            TaskTarget::Goal => self.goal_dim,
            TaskTarget::ReturnCost => 1 + self.cost_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, episodes: Vec<Trajectory>) -> Result<Self> {
        if meta.goal_dim > meta.state_dim {
            return Err(Error::Config(format!(
                "goal dimension {} exceeds state dimension {}",
                meta.goal_dim, meta.state_dim
            )));
        }
        for e in &episodes {
            if e.state_dim != meta.state_dim || e.action_dim != meta.action_dim || e.cost_dim != meta.cost_dim {
                return Err(Error::mismatch(
                    "episode dims (state, action, cost)",
                    format!("({}, {}, {})", meta.state_dim, meta.action_dim, meta.cost_dim),
                    format!("({}, {}, {})", e.state_dim, e.action_dim, e.cost_dim),
                ));
            }
            if e.goal.len() != meta.goal_dim {
                return Err(Error::mismatch("goal length", meta.goal_dim, e.goal.len()));
            }
            e.validate()?;
        }
        Ok(Self { meta, episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// The values this dataset takes after a save/load cycle.
    pub fn quantized(&self) -> Self {
        Self {
            meta: self.meta.clone(),
            episodes: self.episodes.iter().map(Trajectory::quantized).collect(),
        }
    }

    /// Copy with i.i.d. Gaussian noise of standard deviation `std` added to
    /// every recorded state. Actions, rewards, costs and goals are untouched.
    pub fn with_state_noise<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("state-noise std must be non-negative, got {std}")));
        }
        let mut out = self.clone();
        if std > 0.0 {
            for e in &mut out.episodes {
                for s in &mut e.states {
                    *s += std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(out)
    }

    /// Plain-text dump, one step per line:
    /// `episode t x... | u... | r | c...`. The terminal state has no action.
    pub fn export_text<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(" ");
        writeln!(w, "# env={} seed={} episodes={}", self.meta.env, self.meta.seed, self.len())?;
        for (i, e) in self.episodes.iter().enumerate() {
            for t in 0..e.steps() {
                writeln!(
                    w,
                    "{i} {t} {} | {} | {:.9e} | {}",
                    join(e.state(t)),
                    join(e.action(t)),
                    e.rewards[t],
                    join(e.cost(t))
                )?;
            }
            writeln!(w, "{i} {} {}", e.steps(), join(e.state(e.steps())))?;
        }
        Ok(())
    }
}

/// Per-dimension affine maps into the coordinates the denoisers see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub return_min: f64,
    pub return_max: f64,
    pub cost_min: Vec<f64>,
    pub cost_max: Vec<f64>,
}

fn mean_std(rows: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = rows.clone().count().max(1) as f64;
    let mean = rows.clone().sum::<f64>() / n;
    let var = rows.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

fn span(lo: f64, hi: f64) -> f64 {
    (hi - lo).max(STD_FLOOR)
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("cannot fit a normalizer on an empty dataset".into()));
        }
        let m = &data.meta;
        let col = |d: usize, dim: usize, states: bool| {
            data.episodes.iter().flat_map(move |e| {
                let v = if states { &e.states } else { &e.actions };
                v.iter().skip(d).step_by(dim).copied()
            })
        };
        let (state_mean, state_std) = (0..m.state_dim).map(|d| mean_std(col(d, m.state_dim, true))).unzip();
        let (action_mean, action_std) = (0..m.action_dim).map(|d| mean_std(col(d, m.action_dim, false))).unzip();
        let returns: Vec<f64> = data.episodes.iter().map(Trajectory::episode_return).collect();
        let totals: Vec<Vec<f64>> = data.episodes.iter().map(|e| e.cost_to_go(0)).collect();
        let fold = |f: fn(f64, f64) -> f64, init: f64| -> Vec<f64> {
            (0..m.cost_dim).map(|d| totals.iter().map(|c| c[d]).fold(init, f)).collect()
        };
        Ok(Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
            return_min: returns.iter().copied().fold(f64::INFINITY, f64::min),
            return_max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            cost_min: fold(f64::min, f64::INFINITY),
            cost_max: fold(f64::max, f64::NEG_INFINITY),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    /// Normalizes rows of length `state_dim` in place.
    pub fn normalize_states(&self, v: &mut [f64]) {
        affine(v, &self.state_mean, &self.state_std, false);
    }

    pub fn denormalize_states(&self, v: &mut [f64]) {
        affine(v, &self.state_mean, &self.state_std, true);
    }

    pub fn normalize_actions(&self, v: &mut [f64]) {
        affine(v, &self.action_mean, &self.action_std, false);
    }

    pub fn denormalize_actions(&self, v: &mut [f64]) {
        affine(v, &self.action_mean, &self.action_std, true);
    }

    pub fn normalize_goal(&self, goal: &[f64]) -> Vec<f64> {
        goal.iter()
            .enumerate()
            .map(|(i, g)| (g - self.state_mean[i]) / self.state_std[i])
            .collect()
    }

    pub fn denormalize_goal(&self, goal: &[f64]) -> Vec<f64> {
        goal.iter()
            .enumerate()
            .map(|(i, g)| g * self.state_std[i] + self.state_mean[i])
            .collect()
    }

    pub fn normalize_return(&self, r: f64) -> f64 {
        (r - self.return_min) / span(self.return_min, self.return_max)
    }

    pub fn denormalize_return(&self, r: f64) -> f64 {
        r * span(self.return_min, self.return_max) + self.return_min
    }

    pub fn normalize_cost(&self, d: usize, c: f64) -> f64 {
        (c - self.cost_min[d]) / span(self.cost_min[d], self.cost_max[d])
    }

    pub fn denormalize_cost(&self, d: usize, c: f64) -> f64 {
        c * span(self.cost_min[d], self.cost_max[d]) + self.cost_min[d]
    }

    /// Raw task vector of `episode` for a slice starting at `t0`, normalized once.
    pub fn task_vector(&self, target: TaskTarget, episode: &Trajectory, t0: usize) -> Vec<f64> {
        match target {
            TaskTarget::Goal => self.normalize_goal(&episode.goal),
            TaskTarget::ReturnCost => {
                let mut y = vec![self.normalize_return(episode.return_to_go(t0))];
                y.extend(episode.cost_to_go(t0).iter().enumerate().map(|(d, c)| self.normalize_cost(d, *c)));
                y
            }
        }
    }
}

fn affine(v: &mut [f64], mean: &[f64], std: &[f64], inverse: bool) {
    let d = mean.len();
    for row in v.chunks_exact_mut(d) {
        for i in 0..d {
            row[i] = if inverse {
                row[i] * std[i] + mean[i]
            } else {
                (row[i] - mean[i]) / std[i]
            };
        }
    }
}

/// Pre-normalized episodes ready for repeated random slicing.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    y_dim: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    tasks: Vec<Vec<Vec<f64>>>,
}

impl BatchSampler {
    /// Episodes shorter than `horizon` are skipped with a warning.
    pub fn new(data: &Dataset, norm: &Normalizer, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let m = &data.meta;
        let mut s = Self {
            horizon,
            state_dim: m.state_dim,
            action_dim: m.action_dim,
            y_dim: m.y_dim(),
            states: Vec::new(),
            actions: Vec::new(),
            tasks: Vec::new(),
        };
        let mut skipped = 0;
        for e in &data.episodes {
            if e.steps() < horizon {
                skipped += 1;
                continue;
            }
            let mut x = e.states.clone();
            norm.normalize_states(&mut x);
            let mut u = e.actions.clone();
            norm.normalize_actions(&mut u);
            let offsets = e.steps() - horizon + 1;
            let tasks = match m.target {
                TaskTarget::Goal => vec![norm.task_vector(m.target, e, 0)],
                TaskTarget::ReturnCost => (0..offsets).map(|t| norm.task_vector(m.target, e, t)).collect(),
            };
            s.states.push(x);
            s.actions.push(u);
            s.tasks.push(tasks);
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} episodes shorter than horizon {horizon}");
        }
        if s.states.is_empty() {
            return Err(Error::Usage(format!("no episode has at least {horizon} steps")));
        }
        Ok(s)
    }

    pub fn episodes(&self) -> usize {
        self.states.len()
    }

    fn offsets(&self, e: usize) -> usize {
        self.actions[e].len() / self.action_dim - self.horizon + 1
    }

    /// Picks an episode uniformly, then an offset uniformly within it.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let e = rng.random_range(0..self.episodes());
        (e, rng.random_range(0..self.offsets(e)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> TrainBatch {
        let (h, sd, ad) = (self.horizon, self.state_dim, self.action_dim);
        let mut out = TrainBatch {
            batch,
            horizon: h,
            state_dim: sd,
            action_dim: ad,
            y_dim: self.y_dim,
            states: Vec::with_capacity(batch * (h + 1) * sd),
            actions: Vec::with_capacity(batch * h * ad),
            y: Vec::with_capacity(batch * self.y_dim),
        };
        for _ in 0..batch {
            let (e, t0) = self.pick(rng);
            out.states.extend_from_slice(&self.states[e][t0 * sd..(t0 + h + 1) * sd]);
            out.actions.extend_from_slice(&self.actions[e][t0 * ad..(t0 + h) * ad]);
            let tasks = &self.tasks[e];
            out.y.extend_from_slice(&tasks[t0.min(tasks.len() - 1)]);
        }
        out
    }
}

/// One-shot convenience wrapper around [`BatchSampler`].
pub fn slice_training_batch<R: Rng + ?Sized>(
    data: &Dataset,
    norm: &Normalizer,
    horizon: usize,
    batch: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    Ok(BatchSampler::new(data, norm, horizon)?.sample(batch, rng))
}

/// Byte length of the fixed part of a dataset file with a `header_len`-byte
/// JSON header and `n` episodes.
pub fn file_overhead(header_len: usize, n: usize) -> usize {
    8 + 8 + header_len + 8 + n * 16
}

/// Payload bytes of one episode record.
pub fn record_len(meta: &DatasetMeta, steps: usize) -> usize {
    4 * ((steps + 1) * meta.state_dim + steps * (meta.action_dim + 1 + meta.cost_dim) + meta.goal_dim)
}

/// Serializes to `MPDTRAJ1`: magic, header length and JSON header, episode
/// count, an index table of `(byte offset, steps)` pairs, then f32 records.
pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&data.meta).map_err(|e| Error::Format(e.to_string()))?;
    let n = data.len();
    let base = file_overhead(header.len(), n);
    let total = base + data.episodes.iter().map(|e| record_len(&data.meta, e.steps())).sum::<usize>();
    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    let mut offset = base;
    for e in &data.episodes {
        buf.extend_from_slice(&(offset as u64).to_le_bytes());
        buf.extend_from_slice(&(e.steps() as u64).to_le_bytes());
        offset += record_len(&data.meta, e.steps());
    }
    for e in &data.episodes {
        for v in [&e.states, &e.actions, &e.rewards, &e.costs, &e.goal] {
            for x in v.iter() {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
    }
    debug_assert_eq!(buf.len(), total);
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a trajectory dataset (bad magic)".into()));
    }
    let hlen = c.u64("header length")? as usize;
    let meta: DatasetMeta =
        serde_json::from_slice(c.take(hlen, "header")?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let n = c.u64("episode count")? as usize;
    if n > buf.len() / 16 {
        return Err(Error::Format(format!("episode count {n} exceeds file size")));
    }
    let mut index = Vec::with_capacity(n);
    for _ in 0..n {
        index.push((c.u64("index offset")? as usize, c.u64("index steps")? as usize));
    }
    let mut episodes = Vec::with_capacity(n);
    for (i, (offset, steps)) in index.into_iter().enumerate() {
        if offset != c.pos {
            return Err(Error::Format(format!("episode {i}: index offset {offset} does not match layout position {}", c.pos)));
        }
        let m = &meta;
        episodes.push(Trajectory {
            state_dim: m.state_dim,
            action_dim: m.action_dim,
            cost_dim: m.cost_dim,
            states: c.f32s((steps + 1) * m.state_dim, "states")?,
            actions: c.f32s(steps * m.action_dim, "actions")?,
            rewards: c.f32s(steps, "rewards")?,
            costs: c.f32s(steps * m.cost_dim, "costs")?,
            goal: c.f32s(m.goal_dim, "goal")?,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Dataset::new(meta, episodes)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(data)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

/// Returns a warning message when the file was generated under a different
/// environment configuration.
pub fn check_env_hash(data: &Dataset, expected: &str) -> Option<String> {
    (data.meta.env_hash != expected).then(|| {
        format!(
            "dataset was generated for environment hash {} but the current configuration hashes to {expected}",
            data.meta.env_hash
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_dataset(rng: &mut ChaCha8Rng, n: usize, steps: usize, target: TaskTarget) -> Dataset {
        let meta = DatasetMeta {
            env: "toy".into(),
            env_hash: "abc".into(),
            seed: 7,
            state_dim: 2,
            action_dim: 1,
            cost_dim: 1,
            goal_dim: 2,
            target,
            notes: vec![],
        };
        let episodes = (0..n)
            .map(|_| {
                let mut g = |len: usize| (0..len).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
                let states = g((steps + 1) * 2);
                let goal = states[steps * 2..].to_vec();
                Trajectory {
                    state_dim: 2,
                    action_dim: 1,
                    cost_dim: 1,
                    actions: g(steps),
                    rewards: g(steps),
                    costs: (0..steps).map(|_| rng.random_range(0..2) as f64).collect(),
                    states,
                    goal,
                }
            })
            .collect();
        Dataset::new(meta, episodes).unwrap()
    }

    #[test]
    fn constant_dimension_is_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = toy_dataset(&mut rng, 3, 5, TaskTarget::Goal);
        for e in &mut d.episodes {
            for t in 0..=5 {
                e.states[t * 2 + 1] = 4.0;
            }
        }
        let n = Normalizer::fit(&d).unwrap();
        assert_eq!(n.state_std[1], STD_FLOOR);
        let mut row = [0.3, 4.0];
        n.normalize_states(&mut row);
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = toy_dataset(&mut rng, 1, 5, TaskTarget::Goal);
        d.episodes.clear();
        assert!(matches!(Normalizer::fit(&d), Err(Error::Usage(_))));
    }

    #[test]
    fn normalized_moments_are_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = toy_dataset(&mut rng, 20, 30, TaskTarget::Goal);
        let n = Normalizer::fit(&d).unwrap();
        let mut all: Vec<f64> = d.episodes.iter().flat_map(|e| e.states.clone()).collect();
        n.normalize_states(&mut all);
        for dim in 0..2 {
            let col: Vec<f64> = all.iter().skip(dim).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn full_length_slice_has_zero_offset_and_full_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = toy_dataset(&mut rng, 4, 8, TaskTarget::ReturnCost);
        let n = Normalizer::fit(&d).unwrap();
        let s = BatchSampler::new(&d, &n, 8).unwrap();
        for _ in 0..100 {
            assert_eq!(s.pick(&mut rng).1, 0);
        }
        let b = s.sample(16, &mut rng);
        for i in 0..16 {
            let y = b.task(i);
            let ret = n.denormalize_return(y[0]);
            assert!(d.episodes.iter().any(|e| (e.episode_return() - ret).abs() < 1e-9));
        }
    }

    #[test]
    fn short_episodes_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = toy_dataset(&mut rng, 2, 10, TaskTarget::Goal);
        d.episodes.push(toy_dataset(&mut rng, 1, 3, TaskTarget::Goal).episodes.remove(0));
        let n = Normalizer::fit(&d).unwrap();
        assert_eq!(BatchSampler::new(&d, &n, 5).unwrap().episodes(), 2);
        assert!(matches!(BatchSampler::new(&d, &n, 11), Err(Error::Usage(_))));
    }

    #[test]
    fn state_noise_leaves_other_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = toy_dataset(&mut rng, 2, 6, TaskTarget::Goal);
        let noisy = d.with_state_noise(0.1, &mut rng).unwrap();
        for (a, b) in d.episodes.iter().zip(&noisy.episodes) {
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.goal, b.goal);
            assert_ne!(a.states, b.states);
        }
        assert_eq!(d.with_state_noise(0.0, &mut rng).unwrap(), d);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = toy_dataset(&mut rng, 3, 4, TaskTarget::Goal).quantized();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_dataset(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn text_export_has_one_line_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = toy_dataset(&mut rng, 2, 4, TaskTarget::Goal);
        let mut out = Vec::new();
        d.export_text(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 5);
    }
}
