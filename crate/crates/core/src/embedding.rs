//! Frame embeddings, tracks, datasets and their train/query/gallery split.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero.
const ZERO_NORM: f64 = 1e-12;

/// Vectors whose squared norm is already this close to one are left untouched,
/// which makes normalization idempotent on its own output.
const UNIT_SLACK: f64 = 1e-6;

/// Embedding of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f32>> for FeatureVector {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let norm = v.norm();
    if !(norm >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    if (norm * norm - 1.0).abs() <= UNIT_SLACK {
        return Ok(v.clone());
    }
    Ok(FeatureVector(
        v.0.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
    ))
}

/// Sum of squared coordinate differences.
pub fn squared_distance(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    check_dims(u, v)?;
    Ok(squared_distance_unchecked(u.as_slice(), v.as_slice()))
}

pub(crate) fn squared_distance_unchecked(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum()
}

pub fn dot(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    check_dims(u, v)?;
    Ok(u.0
        .iter()
        .zip(&v.0)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum())
}

fn check_dims(u: &FeatureVector, v: &FeatureVector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            found: v.dim(),
        });
    }
    Ok(())
}

/// An ordered run of frames of one identity seen by one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: String,
    pub identity_id: String,
    pub camera_id: u32,
    pub frames: Vec<FeatureVector>,
    /// Per-frame corruption flags, when the producer recorded them.
    pub corrupted: Option<Vec<bool>>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Partition of track indices into training, query and gallery sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Half of the identities (rounded down) train, the rest test.
    HalfHalf,
    /// Fraction of identities used for training.
    TrainFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub tracks: Vec<Track>,
    pub split: Option<Split>,
}

impl Dataset {
    /// Build a dataset and check its invariants.
    pub fn new(dim: usize, tracks: Vec<Track>, split: Option<Split>) -> Result<Self> {
        let ds = Self { dim, tracks, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidDataset("dimension must be positive".into()));
        }
        let mut ids = HashSet::new();
        for track in &self.tracks {
            if !ids.insert(track.track_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate track id {}",
                    track.track_id
                )));
            }
            if track.frames.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "track {} has no frames",
                    track.track_id
                )));
            }
            for f in &track.frames {
                if f.dim() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        found: f.dim(),
                    });
                }
            }
            if let Some(flags) = &track.corrupted {
                if flags.len() != track.frames.len() {
                    return Err(Error::InvalidDataset(format!(
                        "track {} has {} corruption flags for {} frames",
                        track.track_id,
                        flags.len(),
                        track.frames.len()
                    )));
                }
            }
        }
        if let Some(split) = &self.split {
            let n = self.tracks.len();
            for &i in split.train.iter().chain(&split.query).chain(&split.gallery) {
                if i >= n {
                    return Err(Error::InvalidDataset(format!(
                        "split references track index {i} of {n}"
                    )));
                }
            }
            let gallery_ids: HashSet<&str> = split
                .gallery
                .iter()
                .map(|&g| self.tracks[g].identity_id.as_str())
                .collect();
            for &q in &split.query {
                if !gallery_ids.contains(self.tracks[q].identity_id.as_str()) {
                    return Err(Error::QueryWithoutMatch(self.tracks[q].track_id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn track_index(&self, track_id: &str) -> Option<usize> {
        self.tracks.iter().position(|t| t.track_id == track_id)
    }

    /// Track indices grouped by identity, identities in sorted order.
    pub fn identities(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tracks.iter().enumerate() {
            map.entry(t.identity_id.as_str()).or_default().push(i);
        }
        map
    }

    pub fn num_frames(&self) -> usize {
        self.tracks.iter().map(Track::len).sum()
    }

    pub fn split(&self) -> Result<&Split> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::InvalidDataset("dataset has no split".into()))
    }

    /// Tracks used for training; all tracks when no split is present.
    pub fn train_tracks(&self) -> Vec<usize> {
        match &self.split {
            Some(s) => s.train.clone(),
            None => (0..self.tracks.len()).collect(),
        }
    }
}

/// Randomly partition identities into train and test.
///
/// Every test identity contributes its lowest-camera track as the query and a
/// track from a different camera as the gallery entry. Test identities seen by
/// only one camera are dropped from the test side.
pub fn make_split(dataset: &Dataset, rule: SplitRule, seed: u64) -> Result<Dataset> {
    let by_identity = dataset.identities();
    if by_identity.len() < 2 {
        return Err(Error::InsufficientIdentities {
            found: by_identity.len(),
        });
    }
    let n = by_identity.len();
    let n_train = match rule {
        SplitRule::HalfHalf => n / 2,
        SplitRule::TrainFraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "train fraction {f} outside [0, 1]"
                )));
            }
            ((n as f64) * f).round() as usize
        }
    };

    let mut order: Vec<&Vec<usize>> = by_identity.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut split = Split::default();
    for (k, tracks) in order.into_iter().enumerate() {
        if k < n_train {
            split.train.extend(tracks.iter().copied());
            continue;
        }
        let mut by_camera = tracks.clone();
        by_camera.sort_by_key(|&i| (dataset.tracks[i].camera_id, i));
        let query = by_camera[0];
        let cam_a = dataset.tracks[query].camera_id;
        if let Some(&gallery) = by_camera
            .iter()
            .find(|&&i| dataset.tracks[i].camera_id != cam_a)
        {
            split.query.push(query);
            split.gallery.push(gallery);
        }
    }
    split.train.sort_unstable();
    split.query.sort_unstable();
    split.gallery.sort_unstable();

    let mut out = dataset.clone();
    out.split = Some(split);
    out.validate()?;
    Ok(out)
}
