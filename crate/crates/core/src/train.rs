//! Deep Q-learning driver.
//!
//! Each iteration plays one episode on a positive or negative training pair
//! (1:1), acting ε-greedily with the online network. Every environment step
//! pushes a transition and, once the buffer holds a full batch, performs one
//! momentum-SGD update on a uniform mini-batch regressed toward targets from
//! a periodically synchronized copy of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Dataset;
use crate::env::{Action, Episode, EpisodeConfig, Label};
use crate::error::{Error, Result};
use crate::qnet::{input_dim_for, ForwardTrace, Gradients, Progress, QNetworkParams, QValues, HIDDEN};
use crate::replay::{ReplayBuffer, Transition};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub iterations_per_epoch: u32,
    pub lr: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_epochs: f64,
    /// Updates between target-network syncs; 1 means the target is always
    /// the online network.
    pub target_sync_period: u64,
    /// Clamp each gradient coordinate to [-1, 1] before the optimizer step.
    pub grad_clip: bool,
    /// Iterations per training-log record.
    pub log_interval: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            iterations_per_epoch: 2000,
            lr: 1e-4,
            momentum: 0.9,
            gamma: 0.9,
            batch_size: 16,
            replay_capacity: 5000,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_anneal_epochs: 10.0,
            target_sync_period: 500,
            grad_clip: true,
            log_interval: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} outside [0, 1]", self.gamma));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("need 0 < batch_size <= replay_capacity".into());
        }
        if self.target_sync_period == 0 {
            return bad("target_sync_period must be at least 1".into());
        }
        if !(self.epsilon_anneal_epochs >= 0.0) {
            return bad("epsilon_anneal_epochs must be non-negative".into());
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive".into());
        }
        Ok(())
    }
}

/// Linear anneal from `epsilon_start` to `epsilon_end`, then constant.
pub fn epsilon_at(progress: f64, cfg: &TrainConfig) -> f64 {
    if cfg.epsilon_anneal_epochs <= 0.0 || progress >= cfg.epsilon_anneal_epochs {
        return cfg.epsilon_end;
    }
    let frac = (progress / cfg.epsilon_anneal_epochs).max(0.0);
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
}

/// Uniform random action with probability `epsilon`, else the greedy one.
pub fn epsilon_greedy(q: &QValues, epsilon: f64, rng: &mut impl Rng) -> Action {
    if rng.random::<f64>() < epsilon {
        Action::ALL[rng.random_range(0..Action::ALL.len())]
    } else {
        q.argmax()
    }
}

/// `r` for terminal transitions, else `r + gamma * max_a Q_target(s', a)`.
pub fn td_target(t: &Transition, target: &QNetworkParams, gamma: f64) -> Result<f64> {
    match &t.next_state {
        None => Ok(t.reward),
        Some(next) => Ok(t.reward + gamma * target.forward(next)?.max()),
    }
}

/// Draws training track pairs, positives and negatives with equal odds.
#[derive(Debug, Clone)]
pub struct PairPool {
    identities: Vec<Vec<usize>>,
    with_pairs: Vec<usize>,
}

impl PairPool {
    pub fn new(dataset: &Dataset, tracks: &[usize]) -> Result<Self> {
        let mut by_id: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
        for &i in tracks {
            by_id
                .entry(dataset.tracks[i].identity_id.as_str())
                .or_default()
                .push(i);
        }
        if by_id.len() < 2 {
            return Err(Error::InsufficientIdentities { found: by_id.len() });
        }
        let identities: Vec<Vec<usize>> = by_id.into_values().collect();
        let with_pairs: Vec<usize> = (0..identities.len())
            .filter(|&k| identities[k].len() >= 2)
            .collect();
        if with_pairs.is_empty() {
            return Err(Error::NoPositivePairAvailable);
        }
        Ok(Self {
            identities,
            with_pairs,
        })
    }

    /// `(x_track, y_track, label)`. Positive pairs use two cameras when the
    /// identity has them.
    pub fn sample(&self, dataset: &Dataset, rng: &mut impl Rng) -> (usize, usize, Label) {
        if rng.random::<bool>() {
            let id = &self.identities[self.with_pairs[rng.random_range(0..self.with_pairs.len())]];
            let x = id[rng.random_range(0..id.len())];
            let cam = dataset.tracks[x].camera_id;
            let cross: Vec<usize> = id
                .iter()
                .copied()
                .filter(|&t| dataset.tracks[t].camera_id != cam)
                .collect();
            let others: Vec<usize> = if cross.is_empty() {
                id.iter().copied().filter(|&t| t != x).collect()
            } else {
                cross
            };
            let y = others[rng.random_range(0..others.len())];
            (x, y, Label::Same)
        } else {
            let n = self.identities.len();
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let ia = &self.identities[a];
            let ib = &self.identities[b];
            let x = ia[rng.random_range(0..ia.len())];
            let y = ib[rng.random_range(0..ib.len())];
            (x, y, Label::Different)
        }
    }
}

/// Windowed training statistics, one line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u32,
    pub iteration: u32,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub mean_steps: f64,
    pub td_loss: f64,
    pub accuracy: f64,
    /// Accuracy over episodes that ended in `Same` or `Different`.
    pub decision_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub episodes: u32,
    pub updates: u64,
    /// Fraction of episodes ending in the correct decision.
    pub accuracy: f64,
    /// Same, restricted to episodes that did not time out.
    pub decision_accuracy: f64,
    pub mean_steps: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

#[derive(Default)]
struct Window {
    episodes: u32,
    reward: f64,
    steps: u64,
    correct: u32,
    decided: u32,
    loss: f64,
    updates: u64,
}

impl Window {
    fn record(&self, epoch: u32, iteration: u32, epsilon: f64) -> LogRecord {
        let e = f64::from(self.episodes.max(1));
        LogRecord {
            epoch,
            iteration,
            epsilon,
            mean_reward: self.reward / e,
            mean_steps: self.steps as f64 / e,
            td_loss: if self.updates == 0 {
                0.0
            } else {
                self.loss / self.updates as f64
            },
            accuracy: f64::from(self.correct) / e,
            decision_accuracy: f64::from(self.correct) / f64::from(self.decided.max(1)),
        }
    }
}

/// Owns the online and target networks, the replay buffer and the schedule.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    pool: PairPool,
    cfg: TrainConfig,
    ep_cfg: EpisodeConfig,
    online: QNetworkParams,
    target: QNetworkParams,
    buffer: ReplayBuffer,
    progress: Progress,
    grads: Gradients,
    trace: ForwardTrace,
    scratch: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig, ep_cfg: EpisodeConfig) -> Result<Self> {
        let params = QNetworkParams::init(input_dim_for(dataset.dim), seed::derive(cfg.seed, "init"));
        Self::resume(dataset, cfg, ep_cfg, params, Progress::default())
    }

    /// Continue from saved weights, momentum buffers and progress. The replay
    /// buffer starts empty.
    pub fn resume(
        dataset: &'a Dataset,
        cfg: TrainConfig,
        ep_cfg: EpisodeConfig,
        params: QNetworkParams,
        progress: Progress,
    ) -> Result<Self> {
        cfg.validate()?;
        ep_cfg.validate()?;
        let input_dim = input_dim_for(dataset.dim);
        if params.input_dim != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                found: params.input_dim,
            });
        }
        let pool = PairPool::new(dataset, &dataset.train_tracks())?;
        let trace = params.forward_trace(&vec![0.0; input_dim])?;
        Ok(Self {
            dataset,
            pool,
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            target: params.snapshot(),
            online: params,
            cfg,
            ep_cfg,
            progress,
            grads: Gradients::zeros(input_dim),
            trace,
            scratch: vec![0.0; 2 * HIDDEN],
        })
    }

    pub fn params(&self) -> &QNetworkParams {
        &self.online
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn is_done(&self) -> bool {
        self.progress.epochs_completed >= self.cfg.epochs
    }

    /// One epoch of `iterations_per_epoch` episodes. The epoch's random stream
    /// depends only on the seed and the epoch number.
    pub fn run_epoch(&mut self, log: &mut TrainingLog) -> Result<EpochSummary> {
        let epoch = self.progress.epochs_completed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(
            seed::derive(self.cfg.seed, "epoch"),
            u64::from(epoch),
        ));
        let iters = self.cfg.iterations_per_epoch;
        let mut total = Window::default();
        let mut window = Window::default();
        let mut epsilon = epsilon_at(f64::from(epoch), &self.cfg);

        for it in 0..iters {
            epsilon = epsilon_at(
                f64::from(epoch) + f64::from(it) / f64::from(iters.max(1)),
                &self.cfg,
            );
            let (ret, steps, correct, decided, loss, updates) = self.play_training_episode(epsilon, &mut rng)?;
            for w in [&mut window, &mut total] {
                w.episodes += 1;
                w.reward += ret;
                w.steps += steps as u64;
                w.correct += u32::from(correct);
                w.decided += u32::from(decided);
                w.loss += loss;
                w.updates += updates;
            }
            if (it + 1) % self.cfg.log_interval == 0 || it + 1 == iters {
                log.records.push(window.record(epoch, it + 1, epsilon));
                window = Window::default();
            }
        }
        self.progress.epochs_completed += 1;
        let rec = total.record(epoch, iters, epsilon);
        let summary = EpochSummary {
            epoch,
            episodes: total.episodes,
            updates: self.progress.updates,
            accuracy: rec.accuracy,
            decision_accuracy: rec.decision_accuracy,
            mean_steps: rec.mean_steps,
            mean_reward: rec.mean_reward,
        };
        log.epochs.push(summary.clone());
        Ok(summary)
    }

    /// Returns (return, steps, correct decision, decided, summed loss, updates).
    fn play_training_episode(
        &mut self,
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, usize, bool, bool, f64, u64)> {
        let dataset = self.dataset;
        let (xi, yi, label) = self.pool.sample(dataset, rng);
        let mut ep = Episode::new(
            &dataset.tracks[xi],
            &dataset.tracks[yi],
            self.ep_cfg,
            Some(label),
            rng,
        )?;
        let mut ret = 0.0;
        let mut loss = 0.0;
        let mut updates = 0;
        let mut state = ep.state().to_input();
        loop {
            let q = self.online.forward(&state)?;
            let action = epsilon_greedy(&q, epsilon, rng);
            let step = ep.step(action, &q, rng)?;
            let reward = step.reward.expect("training episodes carry ground truth");
            ret += reward;
            let next = (!step.terminal).then(|| ep.state().to_input());
            self.buffer.push(Transition {
                state,
                action,
                reward,
                next_state: next.clone(),
            });
            if self.buffer.len() >= self.cfg.batch_size {
                loss += self.update(rng)?;
                updates += 1;
            }
            match next {
                Some(n) => state = n,
                None => {
                    let correct = matches!(
                        (action, label),
                        (Action::Same, Label::Same) | (Action::Different, Label::Different)
                    );
                    return Ok((ret, ep.t(), correct, action != Action::Unsure, loss, updates));
                }
            }
        }
    }

    /// One mini-batch TD regression step; returns the batch mean loss.
    fn update(&mut self, rng: &mut ChaCha8Rng) -> Result<f64> {
        let slots = self.buffer.sample_indices(self.cfg.batch_size, rng);
        let scale = 1.0 / slots.len() as f64;
        self.grads.clear();
        let mut loss = 0.0;
        for slot in slots {
            let t = self.buffer.get(slot);
            let target = td_target(t, &self.target, self.cfg.gamma)?;
            self.online.forward_into(&t.state, &mut self.trace)?;
            let residual = self.online.accumulate_gradient(
                &t.state,
                &self.trace,
                t.action,
                target,
                scale,
                &mut self.grads,
                &mut self.scratch,
            );
            loss += 0.5 * residual * residual * scale;
        }
        if self.cfg.grad_clip {
            self.grads.clip(1.0);
        }
        self.online
            .sgd_momentum_step(&self.grads, self.cfg.lr, self.cfg.momentum);
        if !loss.is_finite() || !self.online.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after update {}",
                self.progress.updates + 1
            )));
        }
        self.progress.updates += 1;
        if self.progress.updates % self.cfg.target_sync_period == 0 {
            self.target = self.online.snapshot();
        }
        Ok(loss)
    }

    /// Train until `epochs` have completed, calling `on_epoch` after each.
    pub fn run(
        mut self,
        mut on_epoch: impl FnMut(&QNetworkParams, Progress, &EpochSummary) -> Result<()>,
    ) -> Result<(QNetworkParams, TrainingLog)> {
        let mut log = TrainingLog::default();
        while !self.is_done() {
            let summary = self.run_epoch(&mut log)?;
            on_epoch(&self.online, self.progress, &summary)?;
        }
        Ok((self.online, log))
    }
}

/// Train a fresh agent on the dataset's training tracks.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    ep_cfg: &EpisodeConfig,
) -> Result<(QNetworkParams, TrainingLog)> {
    Trainer::new(dataset, cfg.clone(), *ep_cfg)?.run(|_, _, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{FeatureVector, Track};

    fn dataset(ids: usize, tracks_per_id: usize) -> Dataset {
        let mut tracks = Vec::new();
        for id in 0..ids {
            for k in 0..tracks_per_id {
                let mut v = vec![0.0f32; 4];
                v[id % 4] = 1.0;
                tracks.push(Track {
                    track_id: format!("{id}_{k}"),
                    identity_id: format!("p{id}"),
                    camera_id: k as u32,
                    frames: vec![FeatureVector::new(v)],
                    corrupted: None,
                });
            }
        }
        Dataset::new(4, tracks, None).unwrap()
    }

    #[test]
    fn epsilon_schedule() {
        let c = TrainConfig::default();
        assert_eq!(epsilon_at(0.0, &c), 1.0);
        assert!((epsilon_at(5.0, &c) - 0.55).abs() < 1e-12);
        assert_eq!(epsilon_at(10.0, &c), 0.1);
        assert_eq!(epsilon_at(15.0, &c), 0.1);
    }

    #[test]
    fn td_target_cases() {
        let mut p = QNetworkParams::init(2, 0);
        p.values_mut().for_each(|v| *v = 0.0);
        p.layers[2].bias = vec![1.0, -3.0, 0.5];
        let terminal = Transition {
            state: vec![0.0, 0.0],
            action: Action::Same,
            reward: 1.0,
            next_state: None,
        };
        assert_eq!(td_target(&terminal, &p, 0.9).unwrap(), 1.0);
        let cont = Transition {
            reward: 0.2,
            action: Action::Unsure,
            next_state: Some(vec![0.3, 0.1]),
            ..terminal.clone()
        };
        assert!((td_target(&cont, &p, 0.9).unwrap() - 1.1).abs() < 1e-12);
        assert_eq!(td_target(&cont, &p, 0.0).unwrap(), 0.2);
    }

    #[test]
    fn greedy_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = QValues::new(0.1, 0.7, 0.7);
        for _ in 0..100 {
            assert_eq!(epsilon_greedy(&q, 0.0, &mut rng), Action::Different);
        }
        assert_eq!(QValues::new(1.0, 1.0, 1.0).argmax(), Action::Same);

        let mut counts = [0f64; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[epsilon_greedy(&q, 1.0, &mut rng).index()] += 1.0;
        }
        let e = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // chi-square, 2 dof, p = 0.001
        assert!(chi2 < 13.82, "{chi2}");
    }

    #[test]
    fn pair_pool_ratio_and_labels() {
        let ds = dataset(10, 2);
        let pool = PairPool::new(&ds, &ds.train_tracks()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut pos = 0;
        for _ in 0..n {
            let (x, y, label) = pool.sample(&ds, &mut rng);
            let same = ds.tracks[x].identity_id == ds.tracks[y].identity_id;
            assert_eq!(same, label == Label::Same);
            if label == Label::Same {
                pos += 1;
                assert_ne!(ds.tracks[x].camera_id, ds.tracks[y].camera_id);
            }
        }
        let frac = pos as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn pair_pool_needs_positive_pairs() {
        let ds = dataset(5, 1);
        assert!(matches!(
            PairPool::new(&ds, &ds.train_tracks()),
            Err(Error::NoPositivePairAvailable)
        ));
    }

    #[test]
    fn no_update_before_batch_fills() {
        let ds = dataset(4, 2);
        let cfg = TrainConfig {
            epochs: 1,
            iterations_per_epoch: 3,
            batch_size: 64,
            replay_capacity: 100,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&ds, cfg, EpisodeConfig::default()).unwrap();
        let before = trainer.params().clone();
        let mut log = TrainingLog::default();
        trainer.run_epoch(&mut log).unwrap();
        assert!(trainer.buffer().len() < 64);
        assert_eq!(trainer.progress().updates, 0);
        assert_eq!(trainer.params(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset(6, 2);
        let cfg = TrainConfig {
            epochs: 2,
            iterations_per_epoch: 50,
            log_interval: 25,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, la) = train(&ds, &cfg, &EpisodeConfig::default()).unwrap();
        let (b, lb) = train(&ds, &cfg, &EpisodeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.records.len(), 4);
        assert!(a.values().zip(QNetworkParams::init(11, 0).values()).any(|(x, y)| x != y));
    }

    #[test]
    fn resume_matches_uninterrupted_weights_shape() {
        let ds = dataset(6, 2);
        let cfg = TrainConfig {
            epochs: 2,
            iterations_per_epoch: 30,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&ds, cfg.clone(), EpisodeConfig::default()).unwrap();
        let mut log = TrainingLog::default();
        t.run_epoch(&mut log).unwrap();
        let saved = t.params().clone();
        let progress = t.progress();
        let mut resumed = Trainer::resume(&ds, cfg, EpisodeConfig::default(), saved.clone(), progress).unwrap();
        assert_eq!(resumed.params().velocity, saved.velocity);
        resumed.run_epoch(&mut log).unwrap();
        assert!(resumed.is_done());
        assert_eq!(resumed.progress().epochs_completed, 2);
    }
}
