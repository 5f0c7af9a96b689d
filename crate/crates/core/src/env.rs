//! The verification MDP: pair selection, state assembly, actions and rewards.
//!
//! At step `t` the agent sees the current pair's observation
//! `o_t = |f(x_t) - f(y_t)|`, the history `h_t` (a weighted mean of earlier
//! observations, `h_1 = o_1`), and max/min/mean of the squared distances over
//! the seen cross pairs. The step counter itself is never part of the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{squared_distance_unchecked, FeatureVector, Track};
use crate::error::{Error, Result};
use crate::qnet::QValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Same,
    Different,
    Unsure,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Same, Action::Different, Action::Unsure];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

/// Ground truth for a track pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Same,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PairOrder {
    #[default]
    Random,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub t_max: usize,
    pub r_p: f64,
    pub pair_order: PairOrder,
    /// Distance statistics over pairs strictly before the current step,
    /// zero-filled on the first step.
    pub stats_exclusive: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            t_max: 8,
            r_p: 0.2,
            pair_order: PairOrder::Random,
            stats_exclusive: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.r_p) {
            return Err(Error::InvalidConfig(format!(
                "r_p = {} outside [-1, 1]",
                self.r_p
            )));
        }
        Ok(())
    }
}

/// max, min and mean of a set of squared distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

impl DistanceStats {
    pub const ZERO: DistanceStats = DistanceStats {
        max: 0.0,
        min: 0.0,
        mean: 0.0,
    };
}

/// Input to the Q-network at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub history: Vec<f64>,
    pub observation: Vec<f64>,
    pub stats: DistanceStats,
    /// Step counter (1-based). Bookkeeping only; excluded from `to_input`.
    pub t: usize,
}

impl AgentState {
    pub fn input_len(&self) -> usize {
        self.history.len() + self.observation.len() + 3
    }

    /// `[h, o, max, min, mean]`.
    pub fn to_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.input_len());
        self.write_input(&mut v);
        v
    }

    pub fn write_input(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.history);
        out.extend_from_slice(&self.observation);
        out.extend_from_slice(&[self.stats.max, self.stats.min, self.stats.mean]);
    }
}

/// Result of a finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub terminal_action: Action,
    pub steps_used: usize,
    pub final_q: QValues,
    /// Rewards per step; empty when the episode ran without ground truth.
    pub reward_trace: Vec<f64>,
}

impl EpisodeOutcome {
    pub fn images_used(&self) -> usize {
        2 * self.steps_used
    }

    pub fn score(&self) -> f64 {
        self.final_q.margin()
    }
}

/// Weight given to an observation: one minus the softmax mass on `Unsure`.
///
/// Kept strictly inside (0, 1) so the history normalizer never vanishes.
pub fn compute_weight(q: &QValues) -> f64 {
    let m = q.max();
    let es = (q.same - m).exp();
    let ed = (q.different - m).exp();
    let eu = (q.unsure - m).exp();
    let w = (es + ed) / (es + ed + eu);
    w.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Weighted mean of observations, `sum w_i o_i / sum w_i`.
pub fn update_history(history: &[(&[f64], f64)]) -> Result<Vec<f64>> {
    let Some((first, _)) = history.first() else {
        return Err(Error::AllWeightsZero);
    };
    let mut acc = vec![0.0; first.len()];
    let mut total = 0.0;
    for (o, w) in history {
        if o.len() != acc.len() {
            return Err(Error::DimensionMismatch {
                expected: acc.len(),
                found: o.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(*o) {
            *a += w * v;
        }
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::AllWeightsZero);
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

/// Statistics of `|x_i - y_j|^2` over the full cross product of seen frames.
pub fn compute_stats(x_seen: &[&FeatureVector], y_seen: &[&FeatureVector]) -> DistanceStats {
    let mut acc = StatsAccumulator::default();
    for x in x_seen {
        for y in y_seen {
            acc.push(squared_distance_unchecked(x.as_slice(), y.as_slice()));
        }
    }
    acc.stats()
}

#[derive(Debug, Clone, Copy)]
struct StatsAccumulator {
    max: f64,
    min: f64,
    sum: f64,
    count: usize,
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            min: f64::INFINITY,
            sum: 0.0,
            count: 0,
        }
    }
}

impl StatsAccumulator {
    fn push(&mut self, d: f64) {
        self.max = self.max.max(d);
        self.min = self.min.min(d);
        self.sum += d;
        self.count += 1;
    }

    fn stats(&self) -> DistanceStats {
        if self.count == 0 {
            return DistanceStats::ZERO;
        }
        let mean = (self.sum / self.count as f64).clamp(self.min, self.max);
        DistanceStats {
            max: self.max,
            min: self.min,
            mean,
        }
    }
}

/// Reward table: +1 for a correct decision, -1 for a wrong one or for
/// `Unsure` at the last step, `r_p` for `Unsure` before it.
pub fn reward(action: Action, truth: Label, t: usize, cfg: &EpisodeConfig) -> f64 {
    match action {
        Action::Unsure if t >= cfg.t_max => -1.0,
        Action::Unsure => cfg.r_p,
        Action::Same if truth == Label::Same => 1.0,
        Action::Different if truth == Label::Different => 1.0,
        _ => -1.0,
    }
}

/// Frame index source for one track.
#[derive(Debug, Clone)]
struct FrameDraw {
    len: usize,
    remaining: Vec<usize>,
}

impl FrameDraw {
    fn new(len: usize) -> Self {
        Self {
            len,
            remaining: (0..len).collect(),
        }
    }

    /// Uniform without replacement until exhausted, then with replacement.
    fn draw(&mut self, rng: &mut impl Rng) -> usize {
        if self.remaining.is_empty() {
            rng.random_range(0..self.len)
        } else {
            let k = rng.random_range(0..self.remaining.len());
            self.remaining.swap_remove(k)
        }
    }
}

/// Chooses which frame of each track is shown at each step.
#[derive(Debug, Clone)]
pub struct PairSampler {
    order: PairOrder,
    x: FrameDraw,
    y: FrameDraw,
}

impl PairSampler {
    pub fn new(x_len: usize, y_len: usize, order: PairOrder) -> Self {
        Self {
            order,
            x: FrameDraw::new(x_len),
            y: FrameDraw::new(y_len),
        }
    }

    /// Frame indices for step `t` (1-based).
    pub fn next_pair(&mut self, t: usize, rng: &mut impl Rng) -> (usize, usize) {
        match self.order {
            PairOrder::Sequential => ((t - 1) % self.x.len, (t - 1) % self.y.len),
            PairOrder::Random => {
                let i = self.x.draw(rng);
                let j = self.y.draw(rng);
                (i, j)
            }
        }
    }
}

/// One verification episode between two tracks.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    x: &'a Track,
    y: &'a Track,
    cfg: EpisodeConfig,
    truth: Option<Label>,
    sampler: PairSampler,
    seen_x: Vec<usize>,
    seen_y: Vec<usize>,
    stats_now: StatsAccumulator,
    stats_before: StatsAccumulator,
    weighted_sum: Vec<f64>,
    weight_total: f64,
    state: AgentState,
    rewards: Vec<f64>,
    done: bool,
}

/// Effect of one `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    /// `None` when the episode has no ground truth and the action was a decision.
    pub reward: Option<f64>,
    pub terminal: bool,
}

impl<'a> Episode<'a> {
    /// Start an episode and draw the first pair.
    pub fn new(
        x: &'a Track,
        y: &'a Track,
        cfg: EpisodeConfig,
        truth: Option<Label>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if x.is_empty() || y.is_empty() {
            return Err(Error::InvalidDataset("episode over an empty track".into()));
        }
        let d = x.frames[0].dim();
        if y.frames[0].dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: y.frames[0].dim(),
            });
        }
        let mut ep = Self {
            x,
            y,
            cfg,
            truth,
            sampler: PairSampler::new(x.len(), y.len(), cfg.pair_order),
            seen_x: Vec::new(),
            seen_y: Vec::new(),
            stats_now: StatsAccumulator::default(),
            stats_before: StatsAccumulator::default(),
            weighted_sum: vec![0.0; d],
            weight_total: 0.0,
            state: AgentState {
                history: Vec::new(),
                observation: Vec::new(),
                stats: DistanceStats::ZERO,
                t: 0,
            },
            rewards: Vec::new(),
            done: false,
        };
        ep.advance(rng);
        Ok(ep)
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn is_terminal(&self) -> bool {
        self.done
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn truth(&self) -> Option<Label> {
        self.truth
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Distinct frame indices of each track shown so far.
    pub fn seen(&self) -> (&[usize], &[usize]) {
        (&self.seen_x, &self.seen_y)
    }

    /// Apply `action`, taken with action values `q` at the current state.
    /// `q` also fixes the history weight of the current observation.
    pub fn step(&mut self, action: Action, q: &QValues, rng: &mut impl Rng) -> Result<StepResult> {
        if self.done {
            return Err(Error::SteppedTerminalEpisode);
        }
        let t = self.state.t;
        let terminal = action != Action::Unsure || t >= self.cfg.t_max;
        let r = match (action, self.truth) {
            (Action::Unsure, _) => Some(reward(action, Label::Same, t, &self.cfg)),
            (_, Some(truth)) => Some(reward(action, truth, t, &self.cfg)),
            (_, None) => None,
        };
        if let Some(r) = r {
            self.rewards.push(r);
        }
        if terminal {
            self.done = true;
        } else {
            let w = compute_weight(q);
            for (s, &o) in self.weighted_sum.iter_mut().zip(&self.state.observation) {
                *s += w * o;
            }
            self.weight_total += w;
            self.advance(rng);
        }
        Ok(StepResult {
            reward: r,
            terminal,
        })
    }

    /// Draw the next pair and rebuild the state.
    fn advance(&mut self, rng: &mut impl Rng) {
        let t = self.state.t + 1;
        let (i, j) = self.sampler.next_pair(t, rng);
        self.stats_before = self.stats_now;
        if !self.seen_x.contains(&i) {
            let xi = self.x.frames[i].as_slice();
            for &jj in &self.seen_y {
                self.stats_now
                    .push(squared_distance_unchecked(xi, self.y.frames[jj].as_slice()));
            }
            self.seen_x.push(i);
        }
        if !self.seen_y.contains(&j) {
            let yj = self.y.frames[j].as_slice();
            for &ii in &self.seen_x {
                self.stats_now
                    .push(squared_distance_unchecked(self.x.frames[ii].as_slice(), yj));
            }
            self.seen_y.push(j);
        }

        let observation: Vec<f64> = self.x.frames[i]
            .as_slice()
            .iter()
            .zip(self.y.frames[j].as_slice())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .collect();
        let history = if t == 1 {
            observation.clone()
        } else {
            self.weighted_sum
                .iter()
                .map(|s| s / self.weight_total)
                .collect()
        };
        let stats = if self.cfg.stats_exclusive {
            self.stats_before.stats()
        } else {
            self.stats_now.stats()
        };
        self.state = AgentState {
            history,
            observation,
            stats,
            t,
        };
    }

    /// Finish bookkeeping for a terminal episode.
    pub fn outcome(&self, terminal_action: Action, final_q: QValues) -> EpisodeOutcome {
        EpisodeOutcome {
            terminal_action,
            steps_used: self.state.t,
            final_q,
            reward_trace: self.rewards.clone(),
        }
    }
}
