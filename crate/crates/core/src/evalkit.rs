//! Representation extraction, cosine ranking, CMC / mAP and identity folds.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::Tracklet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampling::chunk_bounds;

/// Ranks reported in metric tables.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// First frame of every chunk.
    First,
    /// Average over all chunk-aligned sequences.
    All,
}

impl Strategy {
    pub fn parse(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::First),
            2 => Ok(Self::All),
            other => Err(Error::invalid(format!("test strategy must be 1 or 2, got {other}"))),
        }
    }
}

/// Frame sequences for evaluating a `frames`-long video with `t` chunks.
/// Videos shorter than `t` are planned on a virtual length `t` with wrapped
/// indices.
pub fn chunk_select(frames: usize, t: usize, strategy: Strategy) -> Result<Vec<Vec<usize>>> {
    if frames == 0 || t == 0 {
        return Err(Error::invalid(format!("cannot select {t} chunks from {frames} frames")));
    }
    let len = frames.max(t);
    let chunks: Vec<(usize, usize)> = (0..t).map(|i| chunk_bounds(len, t, i)).collect();
    let count = match strategy {
        Strategy::First => 1,
        Strategy::All => len.div_ceil(t),
    };
    Ok((0..count)
        .map(|s| chunks.iter().map(|&(lo, hi)| (lo + s).min(hi - 1) % frames).collect())
        .collect())
}

/// Concatenated `BN(x_graph) ∥ BN(x_gap)`, averaged over the selected
/// sequences.
pub fn extract_representation(tracklet: &Tracklet, model: &Model, t: usize, strategy: Strategy) -> Result<Vec<f64>> {
    average(chunk_select(tracklet.frames(), t, strategy)?.iter().map(|seq| {
        model.embed(&tracklet.nodes(seq), &tracklet.node_part_sets(seq))
    }))
}

/// Temporal mean of region 0 with no learned component.
pub fn baseline_representation(tracklet: &Tracklet, regions: usize, t: usize, strategy: Strategy) -> Result<Vec<f64>> {
    average(
        chunk_select(tracklet.frames(), t, strategy)?
            .iter()
            .map(|seq| crate::heads::global_representation(&tracklet.nodes(seq), regions)),
    )
}

// Running mean: identical inputs give back the input bit for bit.
fn average(items: impl Iterator<Item = Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let mut mean: Vec<f64> = Vec::new();
    for (k, v) in items.enumerate() {
        let v = v?;
        if k == 0 {
            mean = v;
        } else {
            for (m, x) in mean.iter_mut().zip(&v) {
                *m += (x - *m) / (k + 1) as f64;
            }
        }
    }
    Ok(mean)
}

/// One query or gallery item. `identity < 0` marks a distractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub vector: Vec<f64>,
    pub identity: i64,
    pub camera: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub distances: Vec<Vec<f64>>,
    /// `cmc[k - 1]` is the Rank-k accuracy, for `k = 1..=gallery size`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
    /// Queries with no valid match after junk removal.
    pub skipped: usize,
}

impl RankingResult {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            0.0
        } else {
            self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
        }
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

pub fn rank(queries: &[Entry], gallery: &[Entry]) -> Result<RankingResult> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("ranking needs at least one query and one gallery entry"));
    }
    let distances: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| gallery.iter().map(|g| cosine_distance(&q.vector, &g.vector)).collect())
        .collect();
    let mut hits = vec![0usize; gallery.len()];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    for (q, row) in queries.iter().zip(&distances) {
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let kept: Vec<bool> = order
            .iter()
            .filter(|&&g| {
                let e = &gallery[g];
                !(e.identity < 0 || (e.identity == q.identity && e.camera == q.camera))
            })
            .map(|&g| gallery[g].identity == q.identity)
            .collect();
        let positives = kept.iter().filter(|&&m| m).count();
        if positives == 0 {
            continue;
        }
        evaluated += 1;
        let first = kept.iter().position(|&m| m).expect("has a positive");
        for h in &mut hits[first..] {
            *h += 1;
        }
        let mut found = 0;
        let mut ap = 0.0;
        for (i, &m) in kept.iter().enumerate() {
            if m {
                found += 1;
                ap += found as f64 / (i + 1) as f64;
            }
        }
        ap_sum += ap / positives as f64;
    }
    let denom = evaluated.max(1) as f64;
    Ok(RankingResult {
        distances,
        cmc: hits.into_iter().map(|h| h as f64 / denom).collect(),
        map: ap_sum / denom,
        evaluated,
        skipped: queries.len() - evaluated,
    })
}

/// `folds` random half/half identity partitions `(train, test)`.
pub fn tenfold_splits<T: Clone + Ord>(identities: &[T], folds: usize, rng: &mut impl Rng) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    let mut ids = identities.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("splitting needs at least two identities"));
    }
    Ok((0..folds)
        .map(|_| {
            let mut shuffled = ids.clone();
            shuffled.shuffle(rng);
            let half = shuffled.len() / 2;
            let mut train = shuffled[..half].to_vec();
            let mut test = shuffled[half..].to_vec();
            train.sort();
            test.sort();
            (train, test)
        })
        .collect())
}

pub const METRICS_HEADER: &str = "name,rank1,rank5,rank10,rank20,map,queries,skipped";

pub fn metrics_csv_row(name: &str, r: &RankingResult) -> String {
    let ranks: Vec<String> = REPORT_RANKS.iter().map(|&k| format!("{}", r.rank(k))).collect();
    format!("{name},{},{},{},{}", ranks.join(","), r.map, r.evaluated, r.skipped)
}

/// Percentages in a fixed-width table.
pub fn metrics_table(rows: &[(String, RankingResult)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7}", "method", "R1", "R5", "R10", "R20", "mAP");
    for (name, r) in rows {
        let _ = write!(out, "{name:<24}");
        for k in REPORT_RANKS {
            let _ = write!(out, " {:>7.1}", 100.0 * r.rank(k));
        }
        let _ = writeln!(out, " {:>7.1}", 100.0 * r.map);
    }
    out
}
