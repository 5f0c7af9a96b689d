//! Test-time playout, gallery ranking and CMC curves.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Dataset, Track};
use crate::env::{Episode, EpisodeConfig, EpisodeOutcome};
use crate::error::{Error, Result};
use crate::qnet::{input_dim_for, QNetworkParams};
use crate::seed;
use crate::train::{train, TrainConfig};

/// Play one greedy episode. Ends on a decision or at `t_max`; the score is
/// `q_same - q_different` at the last state either way.
pub fn play_episode_greedy(
    params: &QNetworkParams,
    x: &Track,
    y: &Track,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<EpisodeOutcome> {
    let d = x.frames.first().map_or(0, |f| f.dim());
    if params.input_dim != input_dim_for(d) {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            found: input_dim_for(d),
        });
    }
    let mut ep = Episode::new(x, y, *cfg, None, rng)?;
    let mut input = Vec::with_capacity(params.input_dim);
    loop {
        ep.state().write_input(&mut input);
        let q = params.forward(&input)?;
        let action = q.argmax();
        if ep.step(action, &q, rng)?.terminal {
            return Ok(ep.outcome(action, q));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub track_id: String,
    pub identity_id: String,
}

impl Entry {
    fn of(t: &Track) -> Self {
        Self {
            track_id: t.track_id.clone(),
            identity_id: t.identity_id.clone(),
        }
    }
}

/// Scores for every (query, gallery) pair and the resulting orderings.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub queries: Vec<Entry>,
    pub gallery: Vec<Entry>,
    /// `scores[q][g]`, higher means more similar.
    pub scores: Vec<Vec<f64>>,
    /// `images_used[q][g]`: frames consumed by the pair's verification.
    pub images_used: Vec<Vec<usize>>,
    /// Gallery indices per query, best first. Ties go to the smaller track id.
    pub order: Vec<Vec<usize>>,
}

impl RankingResult {
    pub fn new(
        queries: Vec<Entry>,
        gallery: Vec<Entry>,
        scores: Vec<Vec<f64>>,
        images_used: Vec<Vec<usize>>,
    ) -> Self {
        let order = scores
            .iter()
            .map(|row| rank_order(row, &gallery))
            .collect();
        Self {
            queries,
            gallery,
            scores,
            images_used,
            order,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.queries.len() * self.gallery.len()
    }

    pub fn mean_images(&self) -> f64 {
        let total: usize = self.images_used.iter().flatten().sum();
        total as f64 / self.num_pairs().max(1) as f64
    }

    /// Count of pairs per number of images used.
    pub fn images_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &n in self.images_used.iter().flatten() {
            *h.entry(n).or_insert(0) += 1;
        }
        h
    }

    /// 1-based position of the first correct gallery entry for each query.
    pub fn match_ranks(&self) -> Result<Vec<usize>> {
        self.order
            .iter()
            .zip(&self.queries)
            .map(|(order, q)| {
                order
                    .iter()
                    .position(|&g| self.gallery[g].identity_id == q.identity_id)
                    .map(|p| p + 1)
                    .ok_or_else(|| Error::QueryWithoutMatch(q.track_id.clone()))
            })
            .collect()
    }
}

fn rank_order(scores: &[f64], gallery: &[Entry]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| gallery[a].track_id.cmp(&gallery[b].track_id))
    });
    idx
}

/// Cumulative matching characteristic; `hits[n - 1]` is the rank-n rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub hits: Vec<f64>,
}

impl CmcCurve {
    pub const REPORTED_RANKS: [usize; 4] = [1, 5, 10, 20];

    /// Rank-n rate, with n clamped to the gallery size.
    pub fn rank(&self, n: usize) -> f64 {
        if self.hits.is_empty() {
            return 0.0;
        }
        self.hits[n.clamp(1, self.hits.len()) - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,value\n");
        for (i, v) in self.hits.iter().enumerate() {
            writeln!(out, "{},{:.6}", i + 1, v).unwrap();
        }
        out
    }
}

pub fn cmc(result: &RankingResult) -> Result<CmcCurve> {
    let ranks = result.match_ranks()?;
    let g = result.gallery.len();
    let mut counts = vec![0usize; g + 1];
    for r in &ranks {
        counts[*r] += 1;
    }
    let nq = ranks.len().max(1) as f64;
    let mut acc = 0;
    let hits = (1..=g)
        .map(|n| {
            acc += counts[n];
            acc as f64 / nq
        })
        .collect();
    Ok(CmcCurve { hits })
}

/// One greedy episode per (query, gallery) pair.
///
/// Each pair's random stream is derived from the seed and both track ids, so
/// results do not depend on iteration order or on `workers`.
pub fn rank_all(
    params: &QNetworkParams,
    dataset: &Dataset,
    cfg: &EpisodeConfig,
    seed: u64,
    workers: usize,
) -> Result<RankingResult> {
    let split = dataset.split()?;
    let queries: Vec<&Track> = split.query.iter().map(|&i| &dataset.tracks[i]).collect();
    let gallery: Vec<&Track> = split.gallery.iter().map(|&i| &dataset.tracks[i]).collect();

    let play_row = |q: &Track| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut scores = Vec::with_capacity(gallery.len());
        let mut images = Vec::with_capacity(gallery.len());
        for g in &gallery {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive_pair(seed, &q.track_id, &g.track_id));
            let out = play_episode_greedy(params, q, g, cfg, &mut rng)?;
            scores.push(out.score());
            images.push(out.images_used());
        }
        Ok((scores, images))
    };

    let rows: Vec<Result<(Vec<f64>, Vec<usize>)>> = if workers <= 1 || queries.len() < 2 {
        queries.iter().map(|q| play_row(q)).collect()
    } else {
        let chunk = queries.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .map(|qs| s.spawn(move || qs.iter().map(|q| play_row(q)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };

    let mut scores = Vec::with_capacity(rows.len());
    let mut images = Vec::with_capacity(rows.len());
    for row in rows {
        let (s, i) = row?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite ranking score".into()));
        }
        scores.push(s);
        images.push(i);
    }
    Ok(RankingResult::new(
        queries.iter().map(|t| Entry::of(t)).collect(),
        gallery.iter().map(|t| Entry::of(t)).collect(),
        scores,
        images,
    ))
}

/// Mean of a track's frame features (not re-normalized).
pub fn pooled_feature(t: &Track) -> Vec<f64> {
    let d = t.frames[0].dim();
    let mut acc = vec![0.0; d];
    for f in &t.frames {
        for (a, &v) in acc.iter_mut().zip(f.as_slice()) {
            *a += f64::from(v);
        }
    }
    let m = t.frames.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

/// Inner product of pooled track features.
pub fn pooled_similarity(x: &Track, y: &Track) -> f64 {
    pooled_feature(x)
        .iter()
        .zip(pooled_feature(y))
        .map(|(a, b)| a * b)
        .sum()
}

/// Rank the gallery by pooled-feature similarity using every frame.
pub fn baseline_pool_rank(dataset: &Dataset) -> Result<RankingResult> {
    let split = dataset.split()?;
    let pooled = |i: usize| pooled_feature(&dataset.tracks[i]);
    let gq: Vec<Vec<f64>> = split.query.iter().map(|&i| pooled(i)).collect();
    let gg: Vec<Vec<f64>> = split.gallery.iter().map(|&i| pooled(i)).collect();
    let mut scores = Vec::with_capacity(gq.len());
    let mut images = Vec::with_capacity(gq.len());
    for (qi, q) in split.query.iter().zip(&gq) {
        scores.push(
            gg.iter()
                .map(|g| q.iter().zip(g).map(|(a, b)| a * b).sum())
                .collect(),
        );
        images.push(
            split
                .gallery
                .iter()
                .map(|&g| dataset.tracks[*qi].len() + dataset.tracks[g].len())
                .collect(),
        );
    }
    Ok(RankingResult::new(
        split.query.iter().map(|&i| Entry::of(&dataset.tracks[i])).collect(),
        split.gallery.iter().map(|&i| Entry::of(&dataset.tracks[i])).collect(),
        scores,
        images,
    ))
}

/// Evaluation summary for one trained setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingResult {
    pub r_p: f64,
    pub t_max: usize,
    pub cmc: CmcCurve,
    pub mean_images: f64,
    pub histogram: BTreeMap<usize, usize>,
    pub params: QNetworkParams,
}

impl SettingResult {
    pub fn csv_header() -> &'static str {
        "r_p,t_max,rank1,rank5,rank10,rank20,mean_images"
    }

    pub fn csv_row(&self) -> String {
        format_row(self.r_p, self.t_max, &self.cmc, self.mean_images)
    }
}

pub fn format_row(r_p: f64, t_max: usize, cmc: &CmcCurve, mean_images: f64) -> String {
    format!(
        "{},{},{:.4},{:.4},{:.4},{:.4},{:.3}",
        r_p,
        t_max,
        cmc.rank(1),
        cmc.rank(5),
        cmc.rank(10),
        cmc.rank(20),
        mean_images
    )
}

pub fn histogram_csv(h: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("images,count\n");
    for (k, v) in h {
        writeln!(out, "{k},{v}").unwrap();
    }
    out
}

/// Train and evaluate one (r_p, t_max) setting.
pub fn run_setting(
    dataset: &Dataset,
    base: &EpisodeConfig,
    r_p: f64,
    t_max: usize,
    train_cfg: &TrainConfig,
    eval_seed: u64,
    workers: usize,
) -> Result<SettingResult> {
    let ep = EpisodeConfig {
        r_p,
        t_max,
        ..*base
    };
    ep.validate()?;
    let (params, _) = train(dataset, train_cfg, &ep)?;
    let ranking = rank_all(&params, dataset, &ep, eval_seed, workers)?;
    Ok(SettingResult {
        r_p,
        t_max,
        cmc: cmc(&ranking)?,
        mean_images: ranking.mean_images(),
        histogram: ranking.images_histogram(),
        params,
    })
}

/// Train one agent per (r_p, t_max) combination, r_p varying fastest.
pub fn sweep(
    dataset: &Dataset,
    r_ps: &[f64],
    t_maxes: &[usize],
    train_cfg: &TrainConfig,
    base: &EpisodeConfig,
    eval_seed: u64,
) -> Result<Vec<SettingResult>> {
    let mut out = Vec::with_capacity(r_ps.len() * t_maxes.len());
    for &t_max in t_maxes {
        for &r_p in r_ps {
            out.push(run_setting(dataset, base, r_p, t_max, train_cfg, eval_seed, 1)?);
        }
    }
    Ok(out)
}

pub fn sweep_table(rows: &[SettingResult]) -> String {
    let mut out = String::from(SettingResult::csv_header());
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{FeatureVector, Split};

    fn entry(id: &str, ident: &str) -> Entry {
        Entry {
            track_id: id.into(),
            identity_id: ident.into(),
        }
    }

    fn track(id: &str, ident: &str, cam: u32, frames: &[&[f32]]) -> Track {
        Track {
            track_id: id.into(),
            identity_id: ident.into(),
            camera_id: cam,
            frames: frames.iter().map(|f| FeatureVector::new(f.to_vec())).collect(),
            corrupted: None,
        }
    }

    #[test]
    fn score_is_terminal_q_margin() {
        let mut p = QNetworkParams::init(7, 0);
        p.values_mut().for_each(|v| *v = 0.0);
        p.layers[2].bias = vec![2.0, 0.5, -1.0];
        let x = track("x", "a", 0, &[&[1.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = play_episode_greedy(&p, &x, &x, &EpisodeConfig::default(), &mut rng).unwrap();
        assert_eq!(out.score(), 1.5);
        assert_eq!(out.steps_used, 1);
    }

    #[test]
    fn forced_stop_scores_last_state() {
        let mut p = QNetworkParams::init(7, 0);
        p.values_mut().for_each(|v| *v = 0.0);
        p.layers[2].bias = vec![0.3, 0.1, 1.0];
        let x = track("x", "a", 0, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EpisodeConfig {
            t_max: 4,
            ..EpisodeConfig::default()
        };
        let out = play_episode_greedy(&p, &x, &x, &cfg, &mut rng).unwrap();
        assert_eq!(out.steps_used, 4);
        assert_eq!(out.images_used(), 8);
        assert!((out.score() - 0.2).abs() < 1e-12);
        assert!(matches!(
            play_episode_greedy(&QNetworkParams::init(9, 0), &x, &x, &cfg, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cmc_counting() {
        // true matches at ranks 1, 2 and 5
        let gallery: Vec<Entry> = (0..5).map(|k| entry(&format!("g{k}"), &format!("p{k}"))).collect();
        let queries = vec![entry("q0", "p0"), entry("q1", "p1"), entry("q4", "p4")];
        let scores = vec![
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
            vec![5.0, 4.0, 3.0, 2.0, 1.0],
        ];
        let r = RankingResult::new(queries, gallery, scores, vec![vec![2; 5]; 3]);
        assert_eq!(r.match_ranks().unwrap(), vec![1, 2, 5]);
        let c = cmc(&r).unwrap();
        assert!((c.rank(1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.rank(5), 1.0);
        assert_eq!(c.rank(20), 1.0);
    }

    #[test]
    fn ties_break_by_gallery_id() {
        let gallery = vec![entry("b", "p1"), entry("a", "p0"), entry("c", "p2")];
        let r = RankingResult::new(vec![entry("q", "p0")], gallery, vec![vec![1.0, 1.0, 2.0]], vec![vec![0; 3]]);
        assert_eq!(r.order[0], vec![2, 1, 0]);
    }

    #[test]
    fn query_without_match() {
        let r = RankingResult::new(vec![entry("q", "zz")], vec![entry("g", "p")], vec![vec![0.0]], vec![vec![0]]);
        assert!(matches!(cmc(&r), Err(Error::QueryWithoutMatch(_))));
    }

    #[test]
    fn baseline_examples() {
        let e1 = [1.0f32, 0.0];
        let e2 = [0.0f32, 1.0];
        assert_eq!(
            pooled_similarity(&track("x", "a", 0, &[&e1]), &track("y", "a", 1, &[&e1])),
            1.0
        );
        assert_eq!(
            pooled_similarity(&track("x", "a", 0, &[&e1]), &track("y", "b", 1, &[&e2])),
            0.0
        );
        // mean of two orthogonal unit vectors is not re-normalized
        let two = track("x", "a", 0, &[&e1, &e2]);
        assert!((pooled_similarity(&two, &two) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rank_all_cardinality_and_determinism() {
        let tracks = vec![
            track("a0", "a", 0, &[&[1.0, 0.0]]),
            track("a1", "a", 1, &[&[1.0, 0.0], &[0.6, 0.8]]),
            track("b0", "b", 0, &[&[0.0, 1.0]]),
            track("b1", "b", 1, &[&[0.0, 1.0]]),
            track("c1", "c", 1, &[&[0.8, 0.6]]),
        ];
        let split = Split {
            train: vec![],
            query: vec![0, 2],
            gallery: vec![1, 3, 4],
        };
        let ds = Dataset::new(2, tracks, Some(split)).unwrap();
        let p = QNetworkParams::init(7, 1);
        let cfg = EpisodeConfig::default();
        let a = rank_all(&p, &ds, &cfg, 5, 1).unwrap();
        assert_eq!(a.num_pairs(), 6);
        assert_eq!(a.order.len(), 2);
        assert_eq!(a, rank_all(&p, &ds, &cfg, 5, 1).unwrap());
        assert_eq!(a, rank_all(&p, &ds, &cfg, 5, 3).unwrap());
        let hist = a.images_histogram();
        assert_eq!(hist.values().sum::<usize>(), 6);
        let steps: usize = a.images_used.iter().flatten().map(|i| i / 2).sum();
        assert!((a.mean_images() - 2.0 * steps as f64 / 6.0).abs() < 1e-12);
    }
}
