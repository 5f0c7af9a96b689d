//! Line-delimited embedding record format.
//!
//! ```text
//! dim <d>
//! @train <track_id>            (optional, any number)
//! @query <track_id>            (optional)
//! @gallery <track_id>          (optional)
//! <identity_id> <camera_id> <track_id> <frame_index> <f_1> ... <f_d>
//! ```
//!
//! Fields are separated by ASCII whitespace. Blank lines and lines starting
//! with `#` are ignored. The `dim` header must be the first meaningful line.
//! Identity ids may not start with `#` or `@`. A record with more or fewer
//! than `d` feature values is an error, as is any token that does not parse
//! completely. Records sharing a `track_id` form one track ordered by
//! `frame_index`; every vector is l2-normalized on ingestion.
//!
//! When split lines are present they define the split. Without `@train`
//! lines, training tracks are all tracks whose identity is not used by any
//! query or gallery track.
//!
//! The corruption sidecar (`<path>.corruption`) holds one line per track:
//! `<track_id> <flags>` where `flags` is a string of `0`/`1`, one per frame.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::embedding::{l2_normalize, Dataset, FeatureVector, Split, Track};
use crate::error::{Error, Result};

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".corruption");
    PathBuf::from(s)
}

/// Load an embedding file, plus its corruption sidecar when one exists.
pub fn load_embeddings(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_embeddings(&text)?;
    let side = sidecar_path(path);
    if side.exists() {
        let meta = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        apply_corruption(&mut ds, &meta)?;
    }
    Ok(ds)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

struct PendingTrack {
    identity_id: String,
    camera_id: u32,
    frames: Vec<(u64, usize, FeatureVector)>,
}

pub fn parse_embeddings(text: &str) -> Result<Dataset> {
    let mut dim: Option<usize> = None;
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingTrack> = HashMap::new();
    let mut split_lines: Vec<(usize, &str, String)> = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_ascii_whitespace();
        let first = tokens.next().unwrap_or_default();

        let Some(d) = dim else {
            if first != "dim" {
                return Err(parse_err(line_no, "expected header `dim <d>`"));
            }
            let value = tokens
                .next()
                .ok_or_else(|| parse_err(line_no, "missing dimension"))?;
            let d: usize = value
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad dimension `{value}`")))?;
            if d == 0 {
                return Err(parse_err(line_no, "dimension must be positive"));
            }
            if let Some(extra) = tokens.next() {
                return Err(parse_err(line_no, format!("trailing token `{extra}`")));
            }
            dim = Some(d);
            continue;
        };

        if let Some(role) = first.strip_prefix('@') {
            if !matches!(role, "train" | "query" | "gallery") {
                return Err(parse_err(line_no, format!("unknown split role `{first}`")));
            }
            let id = tokens
                .next()
                .ok_or_else(|| parse_err(line_no, "missing track id"))?;
            if let Some(extra) = tokens.next() {
                return Err(parse_err(line_no, format!("trailing token `{extra}`")));
            }
            split_lines.push((line_no, role, id.to_string()));
            continue;
        }

        let identity_id = first.to_string();
        let camera: u32 = next_parsed(&mut tokens, line_no, "camera_id")?;
        let track_id = tokens
            .next()
            .ok_or_else(|| parse_err(line_no, "missing track_id"))?
            .to_string();
        let frame_index: u64 = next_parsed(&mut tokens, line_no, "frame_index")?;
        let mut values = Vec::with_capacity(d);
        for tok in tokens {
            let v: f32 = tok
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad feature value `{tok}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite feature `{tok}`")));
            }
            values.push(v);
        }
        if values.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: values.len(),
            });
        }
        let feature = l2_normalize(&FeatureVector::new(values))?;

        let entry = pending.entry(track_id.clone()).or_insert_with(|| {
            order.push(track_id.clone());
            PendingTrack {
                identity_id: identity_id.clone(),
                camera_id: camera,
                frames: Vec::new(),
            }
        });
        if entry.identity_id != identity_id || entry.camera_id != camera {
            return Err(parse_err(
                line_no,
                format!("track {track_id} reused with a different identity or camera"),
            ));
        }
        if entry.frames.iter().any(|(fi, _, _)| *fi == frame_index) {
            return Err(parse_err(
                line_no,
                format!("duplicate frame_index {frame_index} in track {track_id}"),
            ));
        }
        entry.frames.push((frame_index, line_no, feature));
    }

    let Some(dim) = dim else {
        return Err(parse_err(last_line.max(1), "missing header"));
    };
    if order.is_empty() {
        return Err(parse_err(last_line.max(1), "no records"));
    }

    let tracks: Vec<Track> = order
        .into_iter()
        .map(|id| {
            let mut p = pending.remove(&id).expect("track registered on first record");
            p.frames.sort_by_key(|(fi, _, _)| *fi);
            Track {
                track_id: id,
                identity_id: p.identity_id,
                camera_id: p.camera_id,
                frames: p.frames.into_iter().map(|(_, _, f)| f).collect(),
                corrupted: None,
            }
        })
        .collect();

    let split = if split_lines.is_empty() {
        None
    } else {
        Some(resolve_split(&tracks, &split_lines)?)
    };
    Dataset::new(dim, tracks, split)
}

fn next_parsed<'a, T: std::str::FromStr>(
    tokens: &mut impl Iterator<Item = &'a str>,
    line: usize,
    field: &str,
) -> Result<T> {
    let tok = tokens
        .next()
        .ok_or_else(|| parse_err(line, format!("missing {field}")))?;
    tok.parse()
        .map_err(|_| parse_err(line, format!("bad {field} `{tok}`")))
}

fn resolve_split(tracks: &[Track], lines: &[(usize, &str, String)]) -> Result<Split> {
    let index: HashMap<&str, usize> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.track_id.as_str(), i))
        .collect();
    let mut split = Split::default();
    let mut has_train = false;
    for (line, role, id) in lines {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| parse_err(*line, format!("unknown track id `{id}`")))?;
        match *role {
            "train" => {
                has_train = true;
                split.train.push(i);
            }
            "query" => split.query.push(i),
            _ => split.gallery.push(i),
        }
    }
    if !has_train {
        let test_ids: HashSet<&str> = split
            .query
            .iter()
            .chain(&split.gallery)
            .map(|&i| tracks[i].identity_id.as_str())
            .collect();
        split.train = (0..tracks.len())
            .filter(|&i| !test_ids.contains(tracks[i].identity_id.as_str()))
            .collect();
    }
    Ok(split)
}

/// Serialize a dataset. Floats use the shortest representation that parses
/// back to the same `f32`.
pub fn write_embeddings(ds: &Dataset) -> String {
    let mut out = String::new();
    writeln!(out, "dim {}", ds.dim).unwrap();
    if let Some(split) = &ds.split {
        for (role, ids) in [
            ("train", &split.train),
            ("query", &split.query),
            ("gallery", &split.gallery),
        ] {
            for &i in ids {
                writeln!(out, "@{role} {}", ds.tracks[i].track_id).unwrap();
            }
        }
    }
    for t in &ds.tracks {
        for (fi, f) in t.frames.iter().enumerate() {
            write!(out, "{} {} {} {}", t.identity_id, t.camera_id, t.track_id, fi).unwrap();
            for v in f.as_slice() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_corruption(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for t in &ds.tracks {
        let flags = t.corrupted.as_ref().ok_or(Error::MissingMetadata)?;
        let bits: String = flags.iter().map(|&c| if c { '1' } else { '0' }).collect();
        writeln!(out, "{} {}", t.track_id, bits).unwrap();
    }
    Ok(out)
}

pub fn apply_corruption(ds: &mut Dataset, text: &str) -> Result<()> {
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_ascii_whitespace();
        let id = tokens.next().unwrap_or_default();
        let bits = tokens
            .next()
            .ok_or_else(|| parse_err(line_no, "missing flags"))?;
        if let Some(extra) = tokens.next() {
            return Err(parse_err(line_no, format!("trailing token `{extra}`")));
        }
        let i = ds
            .track_index(id)
            .ok_or_else(|| parse_err(line_no, format!("unknown track id `{id}`")))?;
        let flags = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(parse_err(line_no, format!("bad flag `{c}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if flags.len() != ds.tracks[i].len() {
            return Err(parse_err(
                line_no,
                format!("{} flags for {} frames", flags.len(), ds.tracks[i].len()),
            ));
        }
        ds.tracks[i].corrupted = Some(flags);
    }
    Ok(())
}

/// Write the dataset and, when every track carries flags, its sidecar.
pub fn save_embeddings(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, write_embeddings(ds)).map_err(|e| Error::io(path, e))?;
    if ds.tracks.iter().all(|t| t.corrupted.is_some()) {
        let side = sidecar_path(path);
        fs::write(&side, write_corruption(ds)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_records_one_track() {
        let ds = parse_embeddings("dim 4\np1 0 t1 1 0 1 0 0\np1 0 t1 0 2 0 0 0\n").unwrap();
        assert_eq!(ds.tracks.len(), 1);
        let t = &ds.tracks[0];
        assert_eq!(t.len(), 2);
        // sorted by frame_index, normalized
        assert_eq!(t.frames[0].as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.frames[1].as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let err = parse_embeddings("dim 4\np1 0 t1 0 1 0 0 0\np1 0 t1 1 1 0 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 4, found: 5 }));
    }

    #[test]
    fn empty_and_headerless_inputs_rejected() {
        assert!(matches!(parse_embeddings(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_embeddings("dim 3\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_embeddings("p1 0 t1 0 1 0 0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn garbage_and_zero_vectors_rejected() {
        let err = parse_embeddings("dim 2\np 0 t 0 1 0\np 0 t 1 1 0x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(
            parse_embeddings("dim 2\np 0 t 0 0 0\n"),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            parse_embeddings("dim 2 extra\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_embeddings("dim 2\np 0 t 0 1 NaN\n"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn explicit_split_lines() {
        let text = "dim 2\n@query a0\n@gallery a1\n@gallery b1\n\
                    a 0 a0 0 1 0\na 1 a1 0 1 0\nb 1 b1 0 0 1\nc 0 c0 0 1 1\n";
        let ds = parse_embeddings(text).unwrap();
        let s = ds.split.unwrap();
        assert_eq!(s.query, vec![0]);
        assert_eq!(s.gallery, vec![1, 2]);
        assert_eq!(s.train, vec![3]);
    }

    #[test]
    fn corruption_sidecar_round_trip() {
        let mut ds = parse_embeddings("dim 2\np 0 t 0 1 0\np 0 t 1 0 1\n").unwrap();
        apply_corruption(&mut ds, "t 01\n").unwrap();
        assert_eq!(ds.tracks[0].corrupted, Some(vec![false, true]));
        assert_eq!(write_corruption(&ds).unwrap(), "t 01\n");
        assert!(apply_corruption(&mut ds, "t 0\n").is_err());
    }

    proptest! {
        #[test]
        fn reserialization_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 5), 1..12)
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let mut text = String::from("dim 5\n");
            for (i, r) in rows.iter().enumerate() {
                let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                let t = i % 4;
                text.push_str(&format!("id{} {} trk{} {} {}\n", t % 2, t / 2, t, i, vals.join(" ")));
            }
            let first = parse_embeddings(&text).unwrap();
            let second = parse_embeddings(&write_embeddings(&first)).unwrap();
            prop_assert_eq!(&first, &second);
            for t in &first.tracks {
                for f in &t.frames {
                    prop_assert!((f.norm() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
