//! Frame sampling, identity-balanced batches and the dataset manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chunk `i` of a `len`-frame video split into `chunks` parts:
/// `[⌊i·len/chunks⌋, ⌊(i+1)·len/chunks⌋)`.
pub fn chunk_bounds(len: usize, chunks: usize, i: usize) -> (usize, usize) {
    (i * len / chunks, (i + 1) * len / chunks)
}

/// One frame drawn uniformly from each of `t` equal chunks. Videos shorter
/// than `t` are planned on a virtual length `t` and indices wrap around.
pub fn restricted_random_sample(frames: usize, t: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if frames == 0 || t == 0 {
        return Err(Error::invalid(format!("cannot sample {t} frames from a {frames}-frame video")));
    }
    let virtual_len = frames.max(t);
    Ok((0..t)
        .map(|i| {
            let (lo, hi) = chunk_bounds(virtual_len, t, i);
            rng.random_range(lo..hi) % frames
        })
        .collect())
}

/// Indices into `labels` forming `p` distinct identities with `k` members
/// each, grouped by identity. Identities with fewer than `k` tracklets are
/// drawn with replacement.
pub fn pk_batch<L: Ord + Clone>(labels: &[L], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_id: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_id.entry(l.clone()).or_default().push(i);
    }
    if p == 0 || k == 0 {
        return Err(Error::invalid("P and K must be positive"));
    }
    if by_id.len() < p {
        return Err(Error::invalid(format!(
            "a batch of {p} identities needs at least {p} identities, found {}",
            by_id.len()
        )));
    }
    let groups: Vec<&Vec<usize>> = by_id.values().collect();
    let mut chosen = sample(rng, groups.len(), p).into_vec();
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(p * k);
    for g in chosen {
        let members = groups[g];
        if members.len() >= k {
            let mut pick = sample(rng, members.len(), k).into_vec();
            pick.sort_unstable();
            out.extend(pick.into_iter().map(|j| members[j]));
        } else {
            out.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
    /// Used as both query and gallery.
    Test,
}

impl Split {
    pub fn is_query(self) -> bool {
        matches!(self, Split::Query | Split::Test)
    }

    pub fn is_gallery(self) -> bool {
        matches!(self, Split::Gallery | Split::Test)
    }
}

/// One manifest row. An identity of `-1` marks a distractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletRecord {
    pub tracklet_id: String,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
    pub frame_count: usize,
    pub feature_path: PathBuf,
    pub keypoint_path: PathBuf,
}

impl TrackletRecord {
    pub fn is_distractor(&self) -> bool {
        self.identity < 0
    }
}

/// Manifest rows plus the directory that relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<TrackletRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, root)
    }

    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for (line, row) in reader.deserialize::<TrackletRecord>().enumerate() {
            let rec = row.map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
            if rec.frame_count == 0 {
                return Err(Error::format(path, format!("row {}: frame_count must be at least 1", line + 1)));
            }
            records.push(rec);
        }
        Ok(Self { root, records })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, pred: impl Fn(Split) -> bool) -> Vec<&TrackletRecord> {
        self.records.iter().filter(|r| pred(r.split)).collect()
    }

    /// Dense class labels `0..C` for the training identities, by ascending identity.
    pub fn train_classes(&self) -> BTreeMap<i64, usize> {
        let mut ids: Vec<i64> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train && !r.is_distractor())
            .map(|r| r.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
    }
}
