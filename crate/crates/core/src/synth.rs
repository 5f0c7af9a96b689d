//! Synthetic tracks with controllable identity separation.
//!
//! Every identity has a prototype on the unit sphere. Each of two cameras adds
//! a fixed offset, each frame adds isotropic Gaussian noise, and a frame may be
//! replaced by a corrupted one (a blend with another identity, or noise).
//! Random draws per frame do not depend on the noise or corruption settings,
//! so changing σ or p at a fixed seed perturbs the same underlying samples.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{Dataset, FeatureVector, Track};
use crate::error::{Error, Result};
use crate::seed;

pub const NUM_CAMERAS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// normalize(0.5 μ_id + 0.5 μ_other): looks partly like someone else.
    #[default]
    DistractorBlend,
    /// A normalized uniform random vector.
    UniformNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub dim: usize,
    pub frames_per_track: usize,
    pub noise_sigma: f64,
    pub camera_shift_sigma: f64,
    pub corruption_prob: f64,
    pub corruption_mode: CorruptionMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            dim: 64,
            frames_per_track: 20,
            noise_sigma: 0.1,
            camera_shift_sigma: 0.2,
            corruption_prob: 0.1,
            corruption_mode: CorruptionMode::DistractorBlend,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_identities < 2 {
            return bad("num_identities must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.frames_per_track == 0 {
            return bad("frames_per_track must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative number");
        }
        if !(self.camera_shift_sigma >= 0.0 && self.camera_shift_sigma.is_finite()) {
            return bad("camera_shift_sigma must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return bad("corruption_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

fn gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-300 {
        // measure-zero event; fall back to the first axis
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.iter().map(|x| x / n).collect()
}

fn to_feature(v: &[f64]) -> FeatureVector {
    FeatureVector::new(unit(v).into_iter().map(|x| x as f32).collect())
}

pub fn identity_name(k: usize) -> String {
    format!("id{k:05}")
}

pub fn track_name(k: usize, camera: u32) -> String {
    format!("id{k:05}_c{camera}")
}

/// Generate one track per camera for every identity.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.dim;
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_identities)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(
                seed::derive(cfg.seed, "prototype"),
                k as u64,
            ));
            unit(&gaussian(d, &mut rng))
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..NUM_CAMERAS)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(
                seed::derive(cfg.seed, "camera"),
                u64::from(c),
            ));
            unit(&gaussian(d, &mut rng))
                .into_iter()
                .map(|x| x * cfg.camera_shift_sigma)
                .collect()
        })
        .collect();

    let mut tracks = Vec::with_capacity(cfg.num_identities * NUM_CAMERAS as usize);
    for (k, proto) in prototypes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(
            seed::derive(cfg.seed, "frames"),
            k as u64,
        ));
        for (c, offset) in offsets.iter().enumerate() {
            let mut frames = Vec::with_capacity(cfg.frames_per_track);
            let mut flags = Vec::with_capacity(cfg.frames_per_track);
            for _ in 0..cfg.frames_per_track {
                let noise = gaussian(d, &mut rng);
                let u: f64 = rng.random();
                let mut other = rng.random_range(0..cfg.num_identities - 1);
                if other >= k {
                    other += 1;
                }
                let uniform: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

                let corrupted = u < cfg.corruption_prob;
                let v: Vec<f64> = if corrupted {
                    match cfg.corruption_mode {
                        CorruptionMode::DistractorBlend => proto
                            .iter()
                            .zip(&prototypes[other])
                            .map(|(a, b)| 0.5 * a + 0.5 * b)
                            .collect(),
                        CorruptionMode::UniformNoise => uniform,
                    }
                } else {
                    proto
                        .iter()
                        .zip(offset)
                        .zip(&noise)
                        .map(|((m, o), n)| m + o + cfg.noise_sigma * n)
                        .collect()
                };
                frames.push(to_feature(&v));
                flags.push(corrupted);
            }
            tracks.push(Track {
                track_id: track_name(k, c as u32),
                identity_id: identity_name(k),
                camera_id: c as u32,
                frames,
                corrupted: Some(flags),
            });
        }
    }
    Dataset::new(d, tracks, None)
}

/// Fraction of corrupted frames per track id.
pub fn label_difficulty(ds: &Dataset) -> Result<BTreeMap<String, f64>> {
    ds.tracks
        .iter()
        .map(|t| {
            let flags = t.corrupted.as_ref().ok_or(Error::MissingMetadata)?;
            let bad = flags.iter().filter(|&&c| c).count();
            Ok((t.track_id.clone(), bad as f64 / flags.len() as f64))
        })
        .collect()
}

/// Overall fraction of corrupted frames.
pub fn corruption_rate(ds: &Dataset) -> Result<f64> {
    let mut bad = 0usize;
    let mut total = 0usize;
    for t in &ds.tracks {
        let flags = t.corrupted.as_ref().ok_or(Error::MissingMetadata)?;
        bad += flags.iter().filter(|&&c| c).count();
        total += flags.len();
    }
    Ok(bad as f64 / total.max(1) as f64)
}

/// Mean cross-camera inner product within identities minus the mean inner
/// product between different identities, over all frame pairs of camera-0
/// and camera-1 tracks.
pub fn separation(ds: &Dataset) -> f64 {
    let mut by_cam: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut ids: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for t in &ds.tracks {
        let c = t.camera_id.min(1) as usize;
        let d = ds.dim;
        let mut mean = vec![0.0; d];
        for f in &t.frames {
            for (m, &x) in mean.iter_mut().zip(f.as_slice()) {
                *m += f64::from(x);
            }
        }
        let n = t.frames.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        by_cam[c].push(mean);
        ids[c].push(t.identity_id.as_str());
    }
    // mean over frame pairs equals the inner product of per-track frame means
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (a, ia) in by_cam[0].iter().zip(&ids[0]) {
        for (b, ib) in by_cam[1].iter().zip(&ids[1]) {
            let ip: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            if ia == ib {
                within += ip;
                nw += 1;
            } else {
                between += ip;
                nb += 1;
            }
        }
    }
    within / nw.max(1) as f64 - between / nb.max(1) as f64
}
